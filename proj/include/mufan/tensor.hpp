#pragma once

// Dense 4-axis double tensor with define-by-run reverse-mode autodiff.
//
// Layout is row-major over (B, C, W, H): H is the fastest-moving axis.
// Every tensor produced by an op while grad mode is on and at least one
// input requires grad records a backward rule and references its inputs.
// Node ids grow monotonically, so sorting reachable nodes by descending id
// gives a valid reverse topological order for the backward sweep.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mufan/errors.hpp"

namespace mufan {

struct Shape {
  std::array<std::size_t, 4> dims{1, 1, 1, 1};

  constexpr Shape() = default;
  constexpr Shape(std::size_t b, std::size_t c = 1, std::size_t w = 1, std::size_t h = 1)
      : dims{b, c, w, h} {}

  constexpr std::size_t operator[](std::size_t i) const { return dims[i]; }
  constexpr std::size_t& operator[](std::size_t i) { return dims[i]; }
  constexpr std::size_t batch() const { return dims[0]; }
  constexpr std::size_t channels() const { return dims[1]; }
  constexpr std::size_t width() const { return dims[2]; }
  constexpr std::size_t height() const { return dims[3]; }
  constexpr std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }
  constexpr std::size_t spatial() const { return dims[2] * dims[3]; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << dims[0] << ',' << dims[1] << ',' << dims[2] << ',' << dims[3] << ')';
    return os.str();
  }
};

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  std::uint64_t id = next_node_id();
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads this node's grad, accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::atomic<bool>& backward_fault_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

}  // namespace detail

/// True when ops record backward rules on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace testing {
// Negative-control hook: when set, the backward rule of mul() is scaled
// by 1.01 so gradient checks must fail.
inline void inject_backward_fault(bool on) { detail::backward_fault_flag() = on; }
inline bool backward_fault_injected() { return detail::backward_fault_flag(); }
}  // namespace testing

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(shape.numel(), 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(shape.numel(), value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, {value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.numel() == 0) throw ShapeMismatch("tensor extents must be positive: " + shape.str());
    if (values.size() != shape.numel()) {
      throw ShapeMismatch("value count " + std::to_string(values.size()) +
                          " does not match shape " + shape.str());
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = shape;
    node_->values = std::move(values);
    if (requires_grad) set_requires_grad(true);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape[axis]; }

  std::span<const double> values() const { return node_->values; }
  /// Writable storage. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_values() { return node_->values; }
  double operator[](std::size_t i) const { return node_->values[i]; }
  double at(std::size_t b, std::size_t c, std::size_t w, std::size_t h) const {
    const auto& s = node_->shape;
    return node_->values[((b * s[1] + c) * s[2] + w) * s[3] + h];
  }

  double item() const {
    if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape().str());
    return node_->values[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && node_->grad.size() != node_->values.size()) node_->grad.assign(node_->values.size(), 0.0);
    if (!on) node_->grad.clear();
  }
  bool is_leaf() const { return node_->is_leaf(); }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Value copy with no history.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }
  /// Deep copy preserving requires_grad, with zeroed grad.
  Tensor clone() const { return Tensor(shape(), node_->values, requires_grad()); }

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  detail::NodePtr node() const { return node_; }

  // Op construction helper: builds a result node, wiring the tape only when
  // grad mode is on and some parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> const& inputs,
                            std::function<void(detail::Node&)> backward_rule) {
    Tensor out(shape, std::move(values), false);
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->grad.assign(out.node_->values.size(), 0.0);
      out.node_->parents.reserve(inputs.size());
      for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(backward_rule);
    }
    return out;
  }

 private:
  detail::NodePtr node_;
};

inline void Tensor::backward() const {
  if (!node_) throw DetachedTape("backward() on an undefined tensor");
  if (numel() != 1) throw NotScalar("backward() requires a scalar loss, got " + shape().str());
  if (!node_->requires_grad) throw DetachedTape("loss does not depend on any tensor requiring grad");

  // Collect reachable nodes that carry gradients.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen.count(p.get())) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
  for (auto* n : order) {
    if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  node_->grad[0] += 1.0;
  for (auto* n : order) {
    if (!n->is_leaf()) n->backward(*n);
  }
}

struct Parameter {
  std::string name;
  Tensor tensor;
};

}  // namespace mufan

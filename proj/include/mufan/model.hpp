#pragma once

// The trainable classifier m. With top-down aggregation it is a small
// conv net (two stride-2 conv + norm + relu blocks, spatial mean, linear
// head) over the full-resolution aggregated map; with standard or
// bottom-up aggregation only the linear head is used, on the flattened map.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mufan/encoder.hpp"
#include "mufan/norm.hpp"

namespace mufan {

enum class EmbeddingKind { logits, penultimate };

struct ClassifierConfig {
  NormConfig norm;
  std::array<std::size_t, 2> widths{16, 32};
  std::size_t num_classes = 10;
  bool full_network = true;  // false: head only
  Shape feature_shape{1, 8, 16, 16};  // (1, C, W, H) of one encoded sample
};

class Classifier {
 public:
  Classifier() = default;

  static Classifier init(std::uint64_t seed, const ClassifierConfig& config) {
    Classifier m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    auto normal = [&rng](Shape s, double std_dev) {
      std::normal_distribution<double> dist(0.0, std_dev);
      std::vector<double> v(s.numel());
      for (double& x : v) x = dist(rng);
      return Tensor(s, std::move(v), true);
    };
    const Shape& fs = config.feature_shape;
    std::size_t in = fs[1];
    std::size_t head_in = fs[1] * fs[2] * fs[3];
    if (config.full_network) {
      if (fs[2] % 4 != 0 || fs[3] % 4 != 0)
        throw InvalidConfig("classifier: feature map " + fs.str() + " must be divisible by 4 spatially");
      for (std::size_t k = 0; k < 2; ++k) {
        const std::size_t out = config.widths[k];
        m.convs_.push_back(normal(Shape{out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9))));
        m.norms_.emplace_back(config.norm, out);
        in = out;
      }
      head_in = in;
    }
    m.head_w_ = normal(Shape{config.num_classes, head_in, 1, 1}, std::sqrt(1.0 / static_cast<double>(head_in)));
    m.head_b_ = Tensor::zeros(Shape{1, config.num_classes}, true);
    return m;
  }

  const ClassifierConfig& config() const { return config_; }

  /// Penultimate representation, (B, F, 1, 1).
  Tensor features(const Tensor& h, Mode mode) {
    const Shape& s = h.shape();
    const Shape& fs = config_.feature_shape;
    if (s[1] != fs[1] || s[2] != fs[2] || s[3] != fs[3])
      throw ShapeMismatch("classifier expects features " + fs.str() + ", got " + s.str());
    if (!config_.full_network) return reshape(h, Shape{s[0], s[1] * s[2] * s[3]});
    Tensor x = h;
    for (std::size_t k = 0; k < convs_.size(); ++k) x = relu(norms_[k].forward(conv2d(x, convs_[k], 2, 1), mode));
    const double inv_area = 1.0 / static_cast<double>(x.shape().spatial());
    return scalar_mul(sum_axes(x, Axes::of({2, 3})), inv_area);
  }

  Tensor head(const Tensor& f) const {
    Tensor z = conv2d(f, head_w_, 1, 0);
    return add(z, expand(head_b_, z.shape()));
  }

  /// Logits, (B, K, 1, 1).
  Tensor forward(const Tensor& h, Mode mode) { return head(features(h, mode)); }

  Tensor embed(const Tensor& h, Mode mode, EmbeddingKind kind) {
    Tensor f = features(h, mode);
    return kind == EmbeddingKind::logits ? head(f) : f;
  }

  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out;
    for (std::size_t k = 0; k < convs_.size(); ++k) {
      out.push_back({"block" + std::to_string(k) + ".conv", convs_[k]});
      auto np = norms_[k].parameters("block" + std::to_string(k) + ".norm");
      out.insert(out.end(), np.begin(), np.end());
    }
    out.push_back({"head.weight", head_w_});
    out.push_back({"head.bias", head_b_});
    return out;
  }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
  }

  /// Deep value copy: parameters and running statistics.
  Classifier clone() const {
    Classifier c;
    c.config_ = config_;
    for (const auto& w : convs_) c.convs_.push_back(w.clone());
    for (const auto& n : norms_) c.norms_.push_back(n.clone());
    c.head_w_ = head_w_.clone();
    c.head_b_ = head_b_.clone();
    return c;
  }

  /// All parameter values followed by all running statistics.
  std::vector<double> flat_state() const {
    std::vector<double> out;
    for (const auto& p : parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
    for (const auto& n : norms_) {
      const auto& rs = n.running_stats();
      out.insert(out.end(), rs.mean.begin(), rs.mean.end());
      out.insert(out.end(), rs.var.begin(), rs.var.end());
    }
    return out;
  }

  std::vector<NormLayer>& norm_layers() { return norms_; }

 private:
  ClassifierConfig config_;
  std::vector<Tensor> convs_;
  std::vector<NormLayer> norms_;
  Tensor head_w_;
  Tensor head_b_;
};

/// Plain SGD: p -= lr * grad, then zero the gradient.
inline void sgd_step(const std::vector<Tensor>& params, double lr) {
  for (auto p : params) {
    auto v = p.mutable_values();
    auto g = p.mutable_grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    p.zero_grad();
  }
}

inline void zero_grads(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

/// FNV-1a over the raw bytes of a value sequence.
inline std::uint64_t hash_values(std::span<const double> values) {
  std::uint64_t h = 1469598103934665603ull;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace mufan

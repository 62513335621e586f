#pragma once

// Replay memory: per-task ring buffers, a reservoir buffer, cross-task
// tuple selection and classifier snapshots.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mufan/encoder.hpp"
#include "mufan/model.hpp"
#include "mufan/streams.hpp"

namespace mufan {

enum class ReplayPolicy { none, ring, reservoir };

inline std::string_view to_string(ReplayPolicy p) {
  switch (p) {
    case ReplayPolicy::none: return "none";
    case ReplayPolicy::ring: return "ring";
    case ReplayPolicy::reservoir: return "reservoir";
  }
  return "?";
}

inline std::optional<ReplayPolicy> parse_replay_policy(std::string_view s) {
  for (auto p : {ReplayPolicy::none, ReplayPolicy::ring, ReplayPolicy::reservoir})
    if (to_string(p) == s) return p;
  return std::nullopt;
}

struct StoredSample {
  Sample sample;
  // Snapshot logits for point-wise distillation; absent until the first
  // snapshot after this slot was written.
  std::optional<std::vector<double>> teacher_logits;
};

struct ReplayDraw {
  std::vector<std::size_t> indices;  // into ReplayBuffer::entries()
  bool with_replacement = false;
};

class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  /// ring: `capacity` slots per task. reservoir: `capacity` slots in total.
  ReplayBuffer(ReplayPolicy policy, std::size_t capacity) : policy_(policy), capacity_(capacity) {
    if (policy != ReplayPolicy::none && capacity == 0) throw InvalidConfig("replay capacity must be positive");
  }

  ReplayPolicy policy() const { return policy_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t seen() const { return seen_; }

  void insert(const Sample& s, std::mt19937_64& rng) {
    ++seen_;
    if (std::find(arrival_.begin(), arrival_.end(), s.label) == arrival_.end()) arrival_.push_back(s.label);
    switch (policy_) {
      case ReplayPolicy::none:
        return;
      case ReplayPolicy::ring: {
        auto& ring = rings_[s.task];
        if (ring.slots.size() < capacity_) {
          ring.slots.push_back({s, std::nullopt});
        } else {
          ring.slots[ring.cursor] = {s, std::nullopt};
          ring.cursor = (ring.cursor + 1) % capacity_;
        }
        return;
      }
      case ReplayPolicy::reservoir: {
        if (flat_.size() < capacity_) {
          flat_.push_back({s, std::nullopt});
          return;
        }
        std::uniform_int_distribution<std::size_t> pick(0, seen_ - 1);
        const std::size_t r = pick(rng);
        if (r < capacity_) flat_[r] = {s, std::nullopt};
        return;
      }
    }
  }

  std::size_t size() const {
    if (policy_ != ReplayPolicy::ring) return flat_.size();
    std::size_t n = 0;
    for (const auto& [task, ring] : rings_) n += ring.slots.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  /// Stored samples in a fixed order: tasks ascending, oldest first within
  /// a task (ring), or slot order (reservoir).
  std::vector<StoredSample*> entries() {
    std::vector<StoredSample*> out;
    if (policy_ != ReplayPolicy::ring) {
      for (auto& s : flat_) out.push_back(&s);
      return out;
    }
    for (auto& [task, ring] : rings_)
      for (std::size_t i = 0; i < ring.slots.size(); ++i) out.push_back(&ring.slots[(ring.cursor + i) % ring.slots.size()]);
    return out;
  }
  std::vector<const StoredSample*> entries() const {
    auto out = const_cast<ReplayBuffer*>(this)->entries();
    return {out.begin(), out.end()};
  }

  std::vector<int> tasks() const {
    std::vector<int> out;
    for (const auto* e : entries())
      if (std::find(out.begin(), out.end(), e->sample.task) == out.end()) out.push_back(e->sample.task);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<const StoredSample*> task_entries(int task) const {
    std::vector<const StoredSample*> out;
    for (const auto* e : entries())
      if (e->sample.task == task) out.push_back(e);
    return out;
  }

  /// Distinct stored labels ranked by first arrival in the stream.
  std::vector<int> stored_classes() const {
    std::vector<int> present;
    for (const auto* e : entries()) present.push_back(e->sample.label);
    std::vector<int> out;
    for (int label : arrival_)
      if (std::find(present.begin(), present.end(), label) != present.end()) out.push_back(label);
    return out;
  }

 private:
  struct Ring {
    std::vector<StoredSample> slots;
    std::size_t cursor = 0;  // next slot to overwrite once full
  };
  ReplayPolicy policy_ = ReplayPolicy::ring;
  std::size_t capacity_ = 50;
  std::size_t seen_ = 0;
  std::map<int, Ring> rings_;
  std::vector<StoredSample> flat_;
  std::vector<int> arrival_;
};

/// Picks `k` distinct indices of [0, n) uniformly, in draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

/// Uniform replay draw; falls back to sampling with replacement when more
/// items are requested than stored.
inline ReplayDraw buffer_sample(const ReplayBuffer& buffer, std::size_t batch_size, std::mt19937_64& rng) {
  const std::size_t n = buffer.size();
  if (n == 0) throw EmptyBuffer("replay buffer is empty");
  ReplayDraw d;
  if (batch_size <= n) {
    d.indices = sample_without_replacement(n, batch_size, rng);
  } else {
    d.with_replacement = true;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < batch_size; ++i) d.indices.push_back(pick(rng));
  }
  return d;
}

/// Groups of stored samples for structure-wise distillation. Group ids are
/// task ids (task-aware) or pseudo-task ids (task-free).
struct TupleSelection {
  std::vector<int> group_ids;
  std::vector<std::vector<Sample>> groups;
};

/// N samples per stored task, drawn without replacement.
inline TupleSelection select_cross_task_tuples(const ReplayBuffer& buffer, std::size_t n, std::mt19937_64& rng) {
  TupleSelection sel;
  for (int task : buffer.tasks()) {
    auto stored = buffer.task_entries(task);
    if (stored.size() < n)
      throw InsufficientSamples("task " + std::to_string(task) + " has " + std::to_string(stored.size()) +
                                " stored samples, " + std::to_string(n) + " requested");
    std::vector<Sample> g;
    for (std::size_t i : sample_without_replacement(stored.size(), n, rng)) g.push_back(stored[i]->sample);
    sel.group_ids.push_back(task);
    sel.groups.push_back(std::move(g));
  }
  return sel;
}

/// Task-free grouping: stored classes ranked by arrival, cut into
/// pseudo-tasks of `s` classes (only the u // s complete ones), N_S samples
/// per class (fewer when a class has fewer stored).
inline TupleSelection select_pseudo_task_tuples(const ReplayBuffer& buffer, std::size_t s, std::size_t n_s,
                                                std::mt19937_64& rng) {
  if (s == 0) throw InvalidConfig("task-free criterion S must be positive");
  TupleSelection sel;
  const auto classes = buffer.stored_classes();
  const std::size_t pseudo = classes.size() / s;
  const auto all = buffer.entries();
  for (std::size_t g = 0; g < pseudo; ++g) {
    std::vector<Sample> group;
    for (std::size_t c = g * s; c < (g + 1) * s; ++c) {
      std::vector<const StoredSample*> of_class;
      for (const auto* e : all)
        if (e->sample.label == classes[c]) of_class.push_back(e);
      const std::size_t take = std::min(n_s, of_class.size());
      for (std::size_t i : sample_without_replacement(of_class.size(), take, rng)) group.push_back(of_class[i]->sample);
    }
    sel.group_ids.push_back(static_cast<int>(g + 1));
    sel.groups.push_back(std::move(group));
  }
  return sel;
}

/// Frozen copy of the classifier at a (pseudo-)task boundary.
class ClassifierSnapshot {
 public:
  ClassifierSnapshot(const Classifier& live, int task) : task_(task), model_(live.clone()) {}

  int task() const { return task_; }

  /// Eval-mode embedding without gradient; does not touch stored values.
  Tensor embed(const Tensor& h, EmbeddingKind kind) const {
    NoGradGuard guard;
    return model_.embed(h, Mode::eval, kind).detach();
  }
  Tensor logits(const Tensor& h) const { return embed(h, EmbeddingKind::logits); }

  std::vector<double> flat_state() const { return model_.flat_state(); }
  /// Independent live copy (e.g. to compare gradients against the snapshot).
  Classifier copy() const { return model_.clone(); }

 private:
  int task_;
  // eval-mode forward passes read but never write running statistics
  mutable Classifier model_;
};

inline ClassifierSnapshot store_snapshot(const Classifier& live, int task) { return ClassifierSnapshot(live, task); }

/// Writes the buffer images as a one-level pyramid file and a sidecar
/// `<path>.labels` with "label task" per line, in entries() order.
inline void dump_buffer(const ReplayBuffer& buffer, const Shape& image_shape, const std::string& path) {
  const auto all = buffer.entries();
  std::vector<const Sample*> samples;
  for (const auto* e : all) samples.push_back(&e->sample);
  FeaturePyramid p;
  p.levels.push_back(stack_images(samples, image_shape));
  write_pyramid(path, p);
  std::ofstream labels(path + ".labels");
  if (!labels) throw Error("cannot write " + path + ".labels");
  for (const auto* s : samples) labels << s->label << ' ' << s->task << '\n';
}

}  // namespace mufan

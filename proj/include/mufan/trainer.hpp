#pragma once

// Online single-pass training loop.

#include <algorithm>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "mufan/config.hpp"
#include "mufan/encoder.hpp"
#include "mufan/losses.hpp"
#include "mufan/metrics.hpp"
#include "mufan/model.hpp"
#include "mufan/replay.hpp"
#include "mufan/streams.hpp"

namespace mufan {

/// Independent generator per concern, derived from one run seed.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id)};
  return std::mt19937_64(seq);
}

/// Encoder outputs for stream samples. With an injected pyramid file the
/// levels are looked up by sample id instead of computed from pixels.
class FeatureSource {
 public:
  FeatureSource(Encoder encoder, Shape image_shape) : encoder_(std::move(encoder)), image_shape_(image_shape) {}

  void inject(FeaturePyramid pyramid, std::size_t total_samples) {
    pyramid.validate();
    const auto& sc = encoder_.config().stage_channels;
    for (std::size_t k = 0; k < 4; ++k) {
      const Shape& s = pyramid.levels[k].shape();
      if (s[0] != total_samples)
        throw InvalidValue("encoder.pyramid_file", "level " + std::to_string(k) + " holds " + std::to_string(s[0]) +
                                                       " rows, stream has " + std::to_string(total_samples) + " samples");
      if (s[1] != sc[k])
        throw InvalidValue("encoder.pyramid_file", "level " + std::to_string(k) + " has " + std::to_string(s[1]) +
                                                       " channels, encoder.stage_channels says " + std::to_string(sc[k]));
    }
    injected_ = std::move(pyramid);
  }
  bool injected() const { return injected_.has_value(); }

  const Encoder& encoder() const { return encoder_; }
  const Shape& image_shape() const { return image_shape_; }

  /// h for raw images (B, C, W, H).
  Tensor encode_images(const Tensor& images) const {
    NoGradGuard guard;
    return encoder_.encode(images).detach();
  }

  /// h for stored samples, optionally augmenting the pixels first.
  Tensor encode(const std::vector<const Sample*>& samples, const AugmentOps* ops = nullptr,
                AugmentScope scope = AugmentScope::none, BatchOrigin origin = BatchOrigin::stream,
                std::mt19937_64* rng = nullptr) const {
    NoGradGuard guard;
    if (injected_) {
      std::vector<std::size_t> rows;
      for (const auto* s : samples) rows.push_back(static_cast<std::size_t>(s->id));
      FeaturePyramid p;
      for (const auto& level : injected_->levels) p.levels.push_back(take_batch(level, rows));
      return aggregate(p, encoder_.config().mode, encoder_.mixer()).detach();
    }
    Tensor images = stack_images(samples, image_shape_);
    if (ops != nullptr && rng != nullptr) images = augment_batch(images, *ops, scope, origin, *rng);
    return encoder_.encode(images).detach();
  }

  Tensor encode(const std::vector<Sample>& samples) const {
    std::vector<const Sample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    return encode(ptrs);
  }

 private:
  Encoder encoder_;
  Shape image_shape_;
  std::optional<FeaturePyramid> injected_;
};

struct ExperimentState {
  ExperimentConfig config;
  std::shared_ptr<const FeatureSource> features;
  Classifier model;
  ReplayBuffer buffer;
  std::optional<ClassifierSnapshot> snapshot;  // latest only
  std::optional<DistillTupleSet> tuples;
  AccuracyMatrix matrix;
  std::mt19937_64 data_rng;    // augmentation
  std::mt19937_64 buffer_rng;  // insertion, replay draws, tuple selection
  std::vector<double> loss_trace;
  std::size_t steps = 0;
  std::vector<std::vector<int>> task_classes;  // for multi-head masks, by task id - 1
  std::size_t stored_class_count = 0;          // task-free: last seen u(Y_M)
  std::size_t pseudo_tasks = 0;                // task-free: u // S at the last snapshot
};

inline std::shared_ptr<const FeatureSource> make_feature_source(const ExperimentConfig& cfg, const TaskStream& stream) {
  auto src = std::make_shared<FeatureSource>(Encoder::init(cfg.encoder.seed, cfg.encoder_config()), stream.image_shape);
  if (!cfg.encoder.pyramid_file.empty()) src->inject(read_pyramid(cfg.encoder.pyramid_file), stream.total_samples());
  return src;
}

inline ExperimentState init_state(const ExperimentConfig& cfg, const TaskStream& stream, std::uint64_t seed,
                                  std::shared_ptr<const FeatureSource> features = nullptr) {
  ExperimentState st;
  st.config = cfg;
  st.features = features ? std::move(features) : make_feature_source(cfg, stream);
  auto init_rng = derive_rng(seed, 3);
  ClassifierConfig mc;
  mc.norm = cfg.norm_config();
  mc.widths = cfg.model.widths;
  mc.num_classes = stream.num_classes;
  mc.full_network = cfg.encoder.aggregate_mode == AggregateMode::top_down;
  mc.feature_shape = st.features->encoder().feature_shape();
  st.model = Classifier::init(init_rng(), mc);
  st.buffer = ReplayBuffer(cfg.replay.policy, cfg.replay.k);
  st.matrix = AccuracyMatrix(stream.tasks.size());
  st.data_rng = derive_rng(seed, 1);
  st.buffer_rng = derive_rng(seed, 2);
  for (const auto& t : stream.tasks) st.task_classes.push_back(t.classes);
  return st;
}

/// Additive logit mask: 0 on the classes of each row's task, -1e9 elsewhere.
inline Tensor task_mask(const ExperimentState& st, const std::vector<int>& tasks, std::size_t num_classes) {
  std::vector<double> m(tasks.size() * num_classes, -1e9);
  for (std::size_t b = 0; b < tasks.size(); ++b)
    for (int c : st.task_classes.at(static_cast<std::size_t>(tasks[b] - 1)))
      m[b * num_classes + static_cast<std::size_t>(c)] = 0.0;
  return Tensor(Shape{tasks.size(), num_classes}, std::move(m));
}

namespace detail {

// Snapshot logits for every stored sample that has none yet.
inline void fill_teacher_logits(ExperimentState& st, const ClassifierSnapshot& snap) {
  std::vector<StoredSample*> missing;
  for (auto* e : st.buffer.entries())
    if (!e->teacher_logits) missing.push_back(e);
  if (missing.empty()) return;
  std::vector<const Sample*> samples;
  for (auto* e : missing) samples.push_back(&e->sample);
  Tensor logits = snap.logits(st.features->encode(samples));
  const std::size_t k = logits.shape()[1];
  for (std::size_t i = 0; i < missing.size(); ++i)
    missing[i]->teacher_logits = std::vector<double>(logits.values().begin() + i * k, logits.values().begin() + (i + 1) * k);
}

inline DistillTupleSet build_tuples(ExperimentState& st, const TupleSelection& sel, const ClassifierSnapshot& snap,
                                    const std::vector<std::pair<int, int>>& pairs) {
  DistillTupleSet set;
  set.snapshot_task = snap.task();
  set.metric = st.config.loss.potential_metric;
  set.embedding = st.config.model.embedding;
  set.tau_teacher = st.config.loss.weights.tau_teacher;
  std::vector<const Sample*> all;
  for (std::size_t g = 0; g < sel.groups.size(); ++g) {
    set.group_ids.push_back(sel.group_ids[g]);
    set.group_offsets.push_back(all.size());
    std::vector<std::uint64_t> ids;
    for (const auto& s : sel.groups[g]) {
      ids.push_back(s.id);
      all.push_back(&s);
    }
    set.sample_ids.push_back(std::move(ids));
  }
  if (all.empty()) return set;
  set.features = st.features->encode(all);
  compute_teacher_potentials(set, snap.embed(set.features, set.embedding), pairs);
  return set;
}

inline bool wants_structure(const ExperimentConfig& c) {
  return c.loss.distill_variant != DistillVariant::none && c.loss.weights.lambda_dcsd > 0.0;
}

// Task-free bookkeeping after buffer writes: point-wise teacher logits when
// the stored class count changes, a snapshot plus pseudo-task tuples when it
// crosses a new multiple of S.
inline void task_free_hook(ExperimentState& st) {
  const std::size_t u = st.buffer.stored_classes().size();
  if (u == st.stored_class_count) return;
  st.stored_class_count = u;
  const auto& lc = st.config.loss;
  ClassifierSnapshot snap = store_snapshot(st.model, static_cast<int>(u));
  if (lc.weights.lambda_dctn > 0.0) fill_teacher_logits(st, snap);
  const std::size_t pseudo = u / lc.s;
  if (pseudo > st.pseudo_tasks) {
    st.pseudo_tasks = pseudo;
    if (wants_structure(st.config)) {
      auto sel = select_pseudo_task_tuples(st.buffer, lc.s, lc.n_s, st.buffer_rng);
      st.tuples = build_tuples(st, sel, snap, task_free_pairs(u, lc.s));
    }
    st.snapshot = std::move(snap);
  }
}

}  // namespace detail

/// One pass over the task's training samples: per incoming batch, U
/// updates of the full objective, then buffer writes.
inline void train_task(ExperimentState& st, const Task& task) {
  const auto& cfg = st.config;
  const bool multi = cfg.model.head_mode == HeadMode::multi;
  const std::size_t k = st.model.config().num_classes;
  const auto params = st.model.parameter_tensors();
  const bool augment = !st.features->injected();
  for (std::size_t start = 0; start < task.train.size(); start += cfg.train.batch) {
    const std::size_t end = std::min(task.train.size(), start + cfg.train.batch);
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&task.train[i]);

    ObjectiveInputs in;
    in.current_features = augment ? st.features->encode(batch, &cfg.train.augment_ops, cfg.train.augment_scope,
                                                        BatchOrigin::stream, &st.data_rng)
                                  : st.features->encode(batch);
    for (const auto* s : batch) in.current_labels.push_back(s->label);
    if (multi) in.current_mask = task_mask(st, std::vector<int>(batch.size(), task.id), k);
    if (st.tuples && !st.tuples->pairs.empty()) in.tuples = &*st.tuples;

    const bool replay = cfg.replay.policy != ReplayPolicy::none && !st.buffer.empty();
    for (std::size_t u = 0; u < cfg.train.inner_updates; ++u) {
      if (replay && (u == 0 || cfg.train.replay_draw == ReplayDrawMode::per_update)) {
        const auto entries = st.buffer.entries();
        const auto draw = buffer_sample(st.buffer, cfg.replay.replay_batch, st.buffer_rng);
        std::vector<const Sample*> rs;
        std::vector<int> tasks;
        in.replay_labels.clear();
        in.replay_teacher_logits.clear();
        for (std::size_t i : draw.indices) {
          rs.push_back(&entries[i]->sample);
          in.replay_labels.push_back(entries[i]->sample.label);
          in.replay_teacher_logits.push_back(entries[i]->teacher_logits);
          tasks.push_back(entries[i]->sample.task);
        }
        in.replay_features = augment ? st.features->encode(rs, &cfg.train.augment_ops, cfg.train.augment_scope,
                                                           BatchOrigin::replay, &st.data_rng)
                                     : st.features->encode(rs);
        if (multi) in.replay_mask = task_mask(st, tasks, k);
      }
      ObjectiveTerms terms = total_objective(in, cfg.loss.weights, st.model);
      terms.total.backward();
      sgd_step(params, cfg.train.lr);
      st.loss_trace.push_back(terms.total.item());
      ++st.steps;
    }
    for (const auto* s : batch) st.buffer.insert(*s, st.buffer_rng);
    if (cfg.task_free()) detail::task_free_hook(st);
  }
}

/// Task boundary (task-aware only): snapshot, point-wise teacher logits
/// for newly stored samples, and cross-task tuples for the next task.
inline void end_of_task(ExperimentState& st, int finished_task) {
  const auto& cfg = st.config;
  if (cfg.task_free()) return;
  ClassifierSnapshot snap = store_snapshot(st.model, finished_task);
  if (cfg.replay.policy != ReplayPolicy::none && cfg.loss.weights.lambda_dctn > 0.0) detail::fill_teacher_logits(st, snap);
  st.tuples.reset();
  if (detail::wants_structure(cfg) && cfg.replay.policy != ReplayPolicy::none) {
    auto sel = select_cross_task_tuples(st.buffer, cfg.loss.n, st.buffer_rng);
    st.tuples = detail::build_tuples(st, sel, snap, distill_pairs(cfg.loss.distill_variant, finished_task + 1));
  }
  st.snapshot = std::move(snap);
}

/// Accuracy of the classifier (eval mode) on the test sets of tasks 1..t.
inline std::vector<double> evaluate_tasks(ExperimentState& st, const TaskStream& stream, std::size_t t,
                                          std::vector<Tensor>* feature_cache = nullptr) {
  NoGradGuard guard;
  const bool multi = st.config.model.head_mode == HeadMode::multi;
  const std::size_t k = st.model.config().num_classes;
  std::vector<double> row;
  for (std::size_t j = 0; j < t; ++j) {
    const Task& task = stream.tasks[j];
    Tensor h;
    if (feature_cache != nullptr && (*feature_cache)[j].defined()) {
      h = (*feature_cache)[j];
    } else {
      h = st.features->encode(task.test);
      if (feature_cache != nullptr) (*feature_cache)[j] = h;
    }
    Tensor logits = st.model.forward(h, Mode::eval);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < task.test.size(); ++b) {
      int best = -1;
      double best_v = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        if (multi && std::find(task.classes.begin(), task.classes.end(), static_cast<int>(c)) == task.classes.end())
          continue;
        const double v = logits[b * k + c];
        if (best < 0 || v > best_v) {
          best = static_cast<int>(c);
          best_v = v;
        }
      }
      if (best == task.test[b].label) ++correct;
    }
    row.push_back(static_cast<double>(correct) / static_cast<double>(task.test.size()));
  }
  return row;
}

/// Hash of everything training can change; evaluation must leave it alone.
inline std::uint64_t state_hash(const ExperimentState& st) {
  std::vector<double> v = st.model.flat_state();
  for (const auto* e : st.buffer.entries()) {
    v.push_back(static_cast<double>(e->sample.id));
    if (e->teacher_logits) v.insert(v.end(), e->teacher_logits->begin(), e->teacher_logits->end());
  }
  v.push_back(static_cast<double>(st.steps));
  return hash_values(v);
}

struct RunResult {
  AccuracyMatrix matrix;
  Metrics metrics;
  std::vector<double> loss_trace;
  std::uint64_t model_hash = 0;
  bool encoder_unchanged = true;
};

/// Full protocol for one seed: train each task, close it, evaluate 1..t.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const TaskStream* stream_in = nullptr,
                                std::shared_ptr<const FeatureSource> features = nullptr) {
  validate_config(cfg);
  std::optional<TaskStream> owned;
  if (stream_in == nullptr) owned = generate_stream(cfg.stream);
  const TaskStream& stream = stream_in ? *stream_in : *owned;
  ExperimentState st = init_state(cfg, stream, seed, std::move(features));
  const auto encoder_before = hash_values(st.features->encoder().flat_weights());
  std::vector<Tensor> cache(stream.tasks.size());
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    train_task(st, stream.tasks[t]);
    end_of_task(st, stream.tasks[t].id);
    st.matrix.set_row(t, evaluate_tasks(st, stream, t + 1, &cache));
  }
  RunResult r;
  r.matrix = st.matrix;
  r.metrics = compute_metrics(st.matrix);
  r.loss_trace = std::move(st.loss_trace);
  r.model_hash = hash_values(st.model.flat_state());
  r.encoder_unchanged = hash_values(st.features->encoder().flat_weights()) == encoder_before;
  return r;
}

}  // namespace mufan

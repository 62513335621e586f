#pragma once

// Training objective: current-task and replay cross-entropy, point-wise KL
// distillation against cached teacher logits, and the cross-task
// structure-wise distillation family built on relational potentials.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mufan/model.hpp"
#include "mufan/ops.hpp"

namespace mufan {

/// Mean over the batch of -log softmax(logits)[label]. logits: (B,K,1,1).
inline Tensor ce_loss(const Tensor& logits, std::span<const int> labels) {
  return neg(mean(select_labels(log_softmax(logits, 1), labels)));
}

/// KL(softmax(teacher/tau) || softmax(student/tau)), averaged over the
/// batch. The teacher side is a constant.
inline Tensor kl_pointwise_distill(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeMismatch("kl_pointwise_distill: " + teacher_logits.shape().str() + " vs " +
                        student_logits.shape().str());
  }
  if (!(tau > 0.0)) throw InvalidConfig("kl_pointwise_distill: tau must be positive");
  Tensor p;
  {
    NoGradGuard guard;
    p = softmax(teacher_logits.detach(), 1, tau).detach();
  }
  double entropy_term = 0.0;  // sum p log p
  for (double v : p.values())
    if (v > 0.0) entropy_term += v * std::log(v);
  const double batch = static_cast<double>(teacher_logits.shape()[0]);
  Tensor cross = sum(mul(p, log_softmax(student_logits, 1, tau)));
  return scalar_mul(add_scalar(neg(cross), entropy_term), 1.0 / batch);
}

// ---------------------------------------------------------------- potentials

enum class PotentialMetric { cosine, l2, arccos };

inline std::string_view to_string(PotentialMetric m) {
  switch (m) {
    case PotentialMetric::cosine: return "cosine";
    case PotentialMetric::l2: return "l2";
    case PotentialMetric::arccos: return "arccos";
  }
  return "?";
}

inline std::optional<PotentialMetric> parse_potential_metric(std::string_view s) {
  for (auto m : {PotentialMetric::cosine, PotentialMetric::l2, PotentialMetric::arccos})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

/// Probability vector over the N tuple members of one anchor.
struct PotentialVector {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double total() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
};

namespace detail {
inline void require_nonzero_rows(const Tensor& a, const char* who) {
  auto [m, d] = rows_of(a);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * a[i * d + k];
    if (!(s > 0.0)) throw ZeroVector(std::string(who) + ": zero embedding at row " + std::to_string(i));
  }
}
}  // namespace detail

/// Relational scores between each anchor row and each tuple row, (A, N):
/// cosine similarity, Euclidean distance, or 1 - arccos(cosine)/pi.
inline Tensor potential_scores(const Tensor& anchors, const Tensor& tuple, PotentialMetric metric) {
  if (metric == PotentialMetric::l2) return pairwise_l2(anchors, tuple);
  detail::require_nonzero_rows(anchors, "potential");
  detail::require_nonzero_rows(tuple, "potential");
  Tensor cos = matmul_nt(l2_normalize_rows(anchors), l2_normalize_rows(tuple));
  if (metric == PotentialMetric::cosine) return cos;
  return add_scalar(scalar_mul(arccos(cos), -1.0 / std::numbers::pi), 1.0);
}

/// Row-wise softmax(scores / tau): one potential vector per anchor.
inline Tensor potential(const Tensor& anchors, const Tensor& tuple, PotentialMetric metric, double tau) {
  return softmax(potential_scores(anchors, tuple, metric), 1, tau);
}

inline std::vector<PotentialVector> potential_rows(const Tensor& potentials) {
  const std::size_t a = potentials.shape()[0];
  const std::size_t n = potentials.shape()[1];
  std::vector<PotentialVector> out(a);
  for (std::size_t i = 0; i < a; ++i)
    out[i].probs.assign(potentials.values().begin() + i * n, potentials.values().begin() + (i + 1) * n);
  return out;
}

// ---------------------------------------------------------------- structure-wise distillation

enum class DistillVariant { none, csd, fsd, lsd, tf };

inline std::string_view to_string(DistillVariant v) {
  switch (v) {
    case DistillVariant::none: return "none";
    case DistillVariant::csd: return "csd";
    case DistillVariant::fsd: return "fsd";
    case DistillVariant::lsd: return "lsd";
    case DistillVariant::tf: return "tf";
  }
  return "?";
}

inline std::optional<DistillVariant> parse_distill_variant(std::string_view s) {
  for (auto v : {DistillVariant::none, DistillVariant::csd, DistillVariant::fsd, DistillVariant::lsd,
                 DistillVariant::tf})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

/// (anchor task, tuple task) pairs summed over while training task t
/// (1-based). Consecutive: (j-1, j) for j = 2..t-1. First: (1, j) for
/// j = 2..t-1. Last: (t-1, j) for j = 2..t-2.
inline std::vector<std::pair<int, int>> distill_pairs(DistillVariant variant, int t) {
  std::vector<std::pair<int, int>> out;
  switch (variant) {
    case DistillVariant::csd:
      for (int j = 2; j <= t - 1; ++j) out.emplace_back(j - 1, j);
      break;
    case DistillVariant::fsd:
      for (int j = 2; j <= t - 1; ++j) out.emplace_back(1, j);
      break;
    case DistillVariant::lsd:
      for (int j = 2; j <= t - 2; ++j) out.emplace_back(t - 1, j);
      break;
    default:
      break;
  }
  return out;
}

/// Outer loop of the task-free loss: j = 2 .. unique_classes // S.
inline std::vector<std::pair<int, int>> task_free_pairs(std::size_t unique_classes, std::size_t s) {
  if (s == 0) throw InvalidConfig("task-free criterion S must be positive");
  std::vector<std::pair<int, int>> out;
  const int upper = static_cast<int>(unique_classes / s);
  for (int j = 2; j <= upper; ++j) out.emplace_back(j - 1, j);
  return out;
}

struct DistillPair {
  int anchor_group = 0;
  int tuple_group = 0;
  std::vector<double> teacher;  // (anchors x tuple) row-major potentials
};

/// Selected cross-task samples, their (fixed) encoder features, and the
/// teacher potentials computed once with the snapshot.
struct DistillTupleSet {
  int snapshot_task = 0;
  std::vector<int> group_ids;                       // task or pseudo-task id per group
  std::vector<std::vector<std::uint64_t>> sample_ids;  // per group
  std::vector<std::size_t> group_offsets;           // row offset of each group in `features`
  Tensor features;                                  // concatenated encoder features, constant
  std::vector<DistillPair> pairs;
  PotentialMetric metric = PotentialMetric::cosine;
  EmbeddingKind embedding = EmbeddingKind::logits;
  double tau_teacher = 1e-4;

  std::size_t group_index(int id) const {
    for (std::size_t g = 0; g < group_ids.size(); ++g)
      if (group_ids[g] == id) return g;
    throw InsufficientSamples("no tuple group for task " + std::to_string(id));
  }
  std::size_t group_size(std::size_t g) const { return sample_ids[g].size(); }
  std::vector<std::size_t> rows_of_group(std::size_t g) const {
    std::vector<std::size_t> rows(group_size(g));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = group_offsets[g] + i;
    return rows;
  }
};

/// Fills `set.pairs` with teacher potentials for the given (anchor, tuple)
/// group pairs. `teacher_embeddings` are the snapshot's embeddings of
/// `set.features`, row for row.
inline void compute_teacher_potentials(DistillTupleSet& set, const Tensor& teacher_embeddings,
                                       const std::vector<std::pair<int, int>>& pairs) {
  set.pairs.clear();
  NoGradGuard guard;
  for (auto [a, b] : pairs) {
    const auto ra = set.rows_of_group(set.group_index(a));
    const auto rb = set.rows_of_group(set.group_index(b));
    Tensor p = potential(take_batch(teacher_embeddings, ra), take_batch(teacher_embeddings, rb), set.metric,
                         set.tau_teacher);
    set.pairs.push_back({a, b, std::vector<double>(p.values().begin(), p.values().end())});
  }
}

struct StructureLoss {
  Tensor value;              // scalar; a constant zero when `empty`
  bool empty = true;         // loop range had no terms
};

/// Sum over pairs and anchors of CE(teacher potential, student potential),
/// CE(p, q) = -sum p log q. The student is evaluated in eval mode so that a
/// student identical to the snapshot reproduces the teacher exactly.
inline StructureLoss structurewise_distill(const DistillTupleSet& set, Classifier& student, double tau_student) {
  if (set.pairs.empty() || !set.features.defined()) return {Tensor::scalar(0.0), true};
  Tensor emb = student.embed(set.features, Mode::eval, set.embedding);
  Tensor total;
  for (const auto& pair : set.pairs) {
    const auto ra = set.rows_of_group(set.group_index(pair.anchor_group));
    const auto rb = set.rows_of_group(set.group_index(pair.tuple_group));
    Tensor scores = potential_scores(take_batch(emb, ra), take_batch(emb, rb), set.metric);
    Tensor teacher(scores.shape(), pair.teacher);
    Tensor term = neg(sum(mul(teacher, log_softmax(scores, 1, tau_student))));
    total = total.defined() ? add(total, term) : term;
  }
  return {total, false};
}

// ---------------------------------------------------------------- total objective

struct LossWeights {
  double lambda_dctn = 10.0;
  double lambda_dcsd = 0.01;
  double tau_dctn = 2.0;
  double tau_teacher = 1e-4;
  double tau_student = 2.0;

  bool operator==(const LossWeights&) const = default;
};

/// Inputs to one evaluation of the full objective. Features are encoder
/// outputs (aggregated maps); replay teacher logits are per replay row and
/// may be missing for rows stored after the last snapshot.
struct ObjectiveInputs {
  Tensor current_features;
  std::vector<int> current_labels;
  Tensor current_mask;  // optional additive logit mask (multi-head)
  Tensor replay_features;  // undefined when the buffer is empty
  std::vector<int> replay_labels;
  Tensor replay_mask;
  std::vector<std::optional<std::vector<double>>> replay_teacher_logits;
  const DistillTupleSet* tuples = nullptr;
};

struct ObjectiveTerms {
  Tensor total;
  Tensor ce;
  Tensor er;    // undefined when no replay
  Tensor dctn;  // undefined when no teacher logits
  Tensor dcsd;  // undefined when no structure pairs
};

/// L = CE + ER + lambda_dctn * D-CTN + lambda_dcsd * D-CSD. Current and
/// replay rows share one train-mode forward pass.
inline ObjectiveTerms total_objective(const ObjectiveInputs& in, const LossWeights& w, Classifier& model) {
  ObjectiveTerms terms;
  // Structure term first: it runs in eval mode and must see the running
  // stats from before this step's train-mode forward updates them.
  Tensor dcsd;
  if (w.lambda_dcsd > 0.0 && in.tuples != nullptr) {
    auto s = structurewise_distill(*in.tuples, model, w.tau_student);
    if (!s.empty) dcsd = s.value;
  }
  const std::size_t nc = in.current_features.shape()[0];
  const bool has_replay = in.replay_features.defined() && in.replay_features.shape()[0] > 0;
  Tensor logits = model.forward(has_replay ? concat_batch({in.current_features, in.replay_features})
                                           : in.current_features,
                                Mode::train);
  Tensor cur = has_replay ? slice_batch(logits, 0, nc) : logits;
  if (in.current_mask.defined()) cur = add(cur, in.current_mask);
  terms.ce = ce_loss(cur, in.current_labels);
  terms.total = terms.ce;
  if (has_replay) {
    Tensor rep = slice_batch(logits, nc, logits.shape()[0]);
    if (in.replay_mask.defined()) rep = add(rep, in.replay_mask);
    terms.er = ce_loss(rep, in.replay_labels);
    terms.total = add(terms.total, terms.er);
    if (w.lambda_dctn > 0.0 && !in.replay_teacher_logits.empty()) {
      std::vector<std::size_t> rows;
      std::vector<double> teacher;
      for (std::size_t i = 0; i < in.replay_teacher_logits.size(); ++i) {
        if (!in.replay_teacher_logits[i]) continue;
        rows.push_back(i);
        teacher.insert(teacher.end(), in.replay_teacher_logits[i]->begin(), in.replay_teacher_logits[i]->end());
      }
      if (!rows.empty()) {
        Tensor student = take_batch(rep, rows);
        // multi-head: the teacher gets the same task mask as the student,
        // otherwise KL chases mass the student can never place
        if (in.replay_mask.defined()) {
          const std::size_t k = student.numel() / rows.size();
          for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < k; ++j) teacher[r * k + j] += in.replay_mask.values()[rows[r] * k + j];
        }
        terms.dctn = kl_pointwise_distill(Tensor(student.shape(), std::move(teacher)), student, w.tau_dctn);
        terms.total = add(terms.total, scalar_mul(terms.dctn, w.lambda_dctn));
      }
    }
  }
  if (dcsd.defined()) {
    terms.dcsd = dcsd;
    terms.total = add(terms.total, scalar_mul(terms.dcsd, w.lambda_dcsd));
  }
  return terms;
}

}  // namespace mufan

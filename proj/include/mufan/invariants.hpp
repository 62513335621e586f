#pragma once

// Self-check suite: gradient checks, normalization moments, distillation
// stationarity, potential properties, the metrics oracle and buffer
// statistics. Used by `mufan_cli check` and the acceptance binary.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mufan/gradcheck.hpp"
#include "mufan/losses.hpp"
#include "mufan/metrics.hpp"
#include "mufan/model.hpp"
#include "mufan/norm.hpp"
#include "mufan/ops.hpp"
#include "mufan/replay.hpp"

namespace mufan::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(s.numel());
  for (double& x : v) x = u(rng);
  return Tensor(s, std::move(v), grad);
}

inline Tensor normal_tensor(std::mt19937_64& rng, Shape s, double mean, double sd, bool grad = false) {
  std::normal_distribution<double> n(mean, sd);
  std::vector<double> v(s.numel());
  for (double& x : v) x = n(rng);
  return Tensor(s, std::move(v), grad);
}

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

// Contracts the op output with fixed random weights so every output
// coordinate contributes to the scalar.
struct OpCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

inline GradCheckReport check_case(const OpCase& c, std::mt19937_64& rng) {
  Tensor probe;
  {
    NoGradGuard guard;
    probe = c.op(c.inputs);
  }
  Tensor weights = random_tensor(rng, probe.shape(), -1.0, 1.0, false);
  auto f = [&] { return sum(mul(c.op(c.inputs), weights)); };
  return finite_difference_check(f, c.inputs, 1e-5, 1e-4);
}

inline std::vector<OpCase> op_cases(std::mt19937_64& rng) {
  auto r = [&rng](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(rng, s, lo, hi); };
  const Shape s4{2, 3, 4, 4};
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor(const std::vector<Tensor>&)> op) {
    cases.push_back({std::move(name), std::move(in), std::move(op)});
  };
  using V = std::vector<Tensor>;
  add_case("add", {r(s4), r(s4)}, [](const V& x) { return add(x[0], x[1]); });
  add_case("sub", {r(s4), r(s4)}, [](const V& x) { return sub(x[0], x[1]); });
  add_case("mul", {r(s4), r(s4)}, [](const V& x) { return mul(x[0], x[1]); });
  add_case("div", {r(s4), r(s4, 0.5, 2.0)}, [](const V& x) { return div(x[0], x[1]); });
  add_case("scalar_mul", {r(s4)}, [](const V& x) { return scalar_mul(x[0], -1.7); });
  add_case("add_scalar", {r(s4)}, [](const V& x) { return add_scalar(x[0], 0.3); });
  add_case("neg", {r(s4)}, [](const V& x) { return neg(x[0]); });
  add_case("relu", {r(s4)}, [](const V& x) { return relu(x[0]); });
  add_case("exp", {r(s4)}, [](const V& x) { return exp(x[0]); });
  add_case("log", {r(s4, 0.5, 2.0)}, [](const V& x) { return log(x[0]); });
  add_case("sqrt", {r(s4, 0.5, 2.0)}, [](const V& x) { return sqrt(x[0]); });
  add_case("reciprocal", {r(s4, 0.5, 2.0)}, [](const V& x) { return reciprocal(x[0]); });
  add_case("square", {r(s4)}, [](const V& x) { return square(x[0]); });
  add_case("arccos", {r(s4, -0.9, 0.9)}, [](const V& x) { return arccos(x[0]); });
  add_case("scale_by", {r(s4), r(Shape{1})}, [](const V& x) { return scale_by(x[0], x[1]); });
  add_case("expand", {r(Shape{1, 3, 1, 1})}, [s4](const V& x) { return expand(x[0], s4); });
  add_case("reshape", {r(s4)}, [](const V& x) { return reshape(x[0], Shape{6, 16}); });
  add_case("sum", {r(s4)}, [](const V& x) { return sum(x[0]); });
  add_case("mean", {r(s4)}, [](const V& x) { return mean(x[0]); });
  add_case("sum_axes", {r(s4)}, [](const V& x) { return sum_axes(x[0], Axes::of({0, 2})); });
  add_case("moments.mean", {r(s4)}, [](const V& x) { return reduce_moments(x[0], Axes::of({0, 2, 3})).mean; });
  add_case("moments.var", {r(s4)}, [](const V& x) { return reduce_moments(x[0], Axes::of({1, 2, 3})).var; });
  add_case("element", {r(s4)}, [](const V& x) { return element(x[0], 7); });
  add_case("split_halves", {r(Shape{2, 4, 3, 3})}, [](const V& x) {
    auto [a, b] = split_halves(x[0]);
    return concat_batch({a, scalar_mul(b, 2.0)});
  });
  add_case("concat_channels", {r(Shape{2, 1, 3, 3}), r(Shape{2, 2, 3, 3})},
           [](const V& x) { return concat_channels(x[0], x[1]); });
  add_case("take_batch", {r(s4)}, [](const V& x) {
    const std::vector<std::size_t> idx{1, 0, 1};
    return take_batch(x[0], idx);
  });
  add_case("slice_batch", {r(Shape{3, 2, 2, 2})}, [](const V& x) { return slice_batch(x[0], 1, 3); });
  add_case("concat_batch", {r(Shape{1, 2, 2, 2}), r(Shape{2, 2, 2, 2})},
           [](const V& x) { return concat_batch({x[0], x[1]}); });
  add_case("conv3x3.s1", {r(Shape{2, 2, 5, 5}), r(Shape{3, 2, 3, 3})}, [](const V& x) { return conv2d(x[0], x[1], 1, 1); });
  add_case("conv3x3.s2", {r(Shape{2, 2, 6, 6}), r(Shape{3, 2, 3, 3})}, [](const V& x) { return conv2d(x[0], x[1], 2, 1); });
  add_case("conv1x1", {r(Shape{2, 3, 4, 4}), r(Shape{2, 3, 1, 1})}, [](const V& x) { return conv2d(x[0], x[1], 1, 0); });
  add_case("maxpool2x2", {r(s4)}, [](const V& x) { return maxpool2x2(x[0]); });
  add_case("upsample_bilinear2x", {r(Shape{2, 2, 3, 3})}, [](const V& x) { return upsample_bilinear2x(x[0]); });
  add_case("softmax", {r(Shape{3, 5})}, [](const V& x) { return softmax(x[0], 1, 0.7); });
  add_case("log_softmax", {r(Shape{3, 5})}, [](const V& x) { return log_softmax(x[0], 1, 2.0); });
  add_case("select_labels", {r(Shape{3, 4})}, [](const V& x) {
    const std::vector<int> labels{2, 0, 3};
    return select_labels(x[0], labels);
  });
  add_case("matmul_nt", {r(Shape{3, 4}), r(Shape{2, 4})}, [](const V& x) { return matmul_nt(x[0], x[1]); });
  add_case("l2_normalize_rows", {r(Shape{3, 4})}, [](const V& x) { return l2_normalize_rows(x[0]); });
  add_case("pairwise_l2", {r(Shape{3, 4}), r(Shape{2, 4})}, [](const V& x) { return pairwise_l2(x[0], x[1]); });

  // normalization layers, train mode, gradients w.r.t. input and parameters
  for (auto kind : {NormKind::bn, NormKind::in, NormKind::ln, NormKind::gn, NormKind::sn, NormKind::cn, NormKind::spn}) {
    auto layer = std::make_shared<NormLayer>(NormConfig{kind, 2, 0.1, 1e-5}, 4);
    V in{random_tensor(rng, Shape{3, 4, 3, 3}, -2.0, 2.0)};
    for (auto& p : layer->parameters("n")) {
      auto v = p.tensor.mutable_values();
      std::uniform_real_distribution<double> u(-0.5, 0.5);
      for (double& x : v) x += u(rng);
      in.push_back(p.tensor);
    }
    add_case("norm." + std::string(to_string(kind)), in,
             [layer](const V& x) { return layer->forward(x[0], Mode::train); });
  }
  // encoder aggregation over a small random pyramid
  for (auto mode : {AggregateMode::top_down, AggregateMode::bottom_up, AggregateMode::standard}) {
    MixerWeights mixer;
    const std::array<std::size_t, 4> ch{2, 2, 3, 3};
    // fan-in scaled, otherwise the nested top-down path blows up the output
    auto w = [&rng](Shape s) {
      const double a = 1.0 / std::sqrt(static_cast<double>(s[1] * s[2] * s[3]));
      return random_tensor(rng, s, -a, a, false);
    };
    for (std::size_t k = 0; k < 4; ++k) mixer.ccm.push_back(w(Shape{ch[k], ch[k], 1, 1}));
    for (std::size_t k = 0; k < 3; ++k) {
      mixer.csm_top_down.push_back(w(Shape{ch[k], ch[k + 1], 3, 3}));
      mixer.csm_bottom_up.push_back(w(Shape{ch[k + 1], ch[k], 3, 3}));
    }
    V levels;
    for (std::size_t k = 0; k < 4; ++k) levels.push_back(r(Shape{1, ch[k], std::size_t{16} >> k, std::size_t{16} >> k}));
    add_case("aggregate." + std::string(to_string(mode)), levels, [mixer, mode](const V& x) {
      FeaturePyramid p;
      p.levels = x;
      return aggregate(p, mode, mixer);
    });
  }
  // losses
  add_case("ce_loss", {r(Shape{3, 4})}, [](const V& x) {
    const std::vector<int> labels{1, 3, 0};
    return ce_loss(x[0], labels);
  });
  {
    Tensor teacher = random_tensor(rng, Shape{3, 4}, -2, 2, false);
    add_case("kl_pointwise", {r(Shape{3, 4})}, [teacher](const V& x) { return kl_pointwise_distill(teacher, x[0], 2.0); });
  }
  for (auto metric : {PotentialMetric::cosine, PotentialMetric::l2, PotentialMetric::arccos})
    add_case("potential." + std::string(to_string(metric)), {r(Shape{2, 5}), r(Shape{3, 5})},
             [metric](const V& x) { return potential(x[0], x[1], metric, 0.5); });
  return cases;
}

// A toy 3-task state for the composed objective: SPN classifier on
// top-down-shaped features, replay rows with teacher logits, and one
// consecutive-task structure pair.
struct ToyObjective {
  Classifier model;
  ObjectiveInputs inputs;
  DistillTupleSet tuples;
  LossWeights weights;
  std::vector<RunningStats> saved_stats;

  void restore_stats() {
    auto& norms = model.norm_layers();
    for (std::size_t i = 0; i < norms.size(); ++i) norms[i].running_stats() = saved_stats[i];
  }
};

inline ToyObjective make_toy_objective(std::uint64_t seed, PotentialMetric metric = PotentialMetric::cosine) {
  std::mt19937_64 rng(seed);
  ToyObjective toy;
  ClassifierConfig cfg;
  cfg.norm.kind = NormKind::spn;
  cfg.widths = {4, 4};
  cfg.num_classes = 4;
  cfg.full_network = true;
  cfg.feature_shape = Shape{1, 2, 8, 8};
  toy.model = Classifier::init(seed, cfg);
  for (auto& p : toy.model.parameters()) {
    std::uniform_real_distribution<double> u(-0.2, 0.2);
    for (double& x : p.tensor.mutable_values()) x += u(rng);
  }
  auto& norms = toy.model.norm_layers();
  for (auto& n : norms) {
    auto& rs = n.running_stats();
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (double& m : rs.mean) m = u(rng) - 1.0;
    for (double& v : rs.var) v = u(rng);
  }
  for (auto& n : norms) toy.saved_stats.push_back(n.running_stats());
  const Shape fs{1, 2, 8, 8};
  auto feats = [&](std::size_t b) { return random_tensor(rng, Shape{b, fs[1], fs[2], fs[3]}, 0.0, 2.0, false); };
  toy.inputs.current_features = feats(3);
  toy.inputs.current_labels = {0, 1, 1};
  toy.inputs.replay_features = feats(4);
  toy.inputs.replay_labels = {2, 3, 2, 0};
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 4; ++i) {
    if (i == 2) {
      toy.inputs.replay_teacher_logits.push_back(std::nullopt);
      continue;
    }
    std::vector<double> logits(4);
    for (double& v : logits) v = n(rng);
    toy.inputs.replay_teacher_logits.push_back(logits);
  }
  // groups for tasks 1 and 2, two samples each
  toy.tuples.metric = metric;
  toy.tuples.tau_teacher = 0.5;
  toy.tuples.group_ids = {1, 2};
  toy.tuples.sample_ids = {{0, 1}, {2, 3}};
  toy.tuples.group_offsets = {0, 2};
  toy.tuples.features = feats(4);
  {
    Classifier teacher = toy.model.clone();
    for (auto& p : teacher.parameters())
      for (double& x : p.tensor.mutable_values()) x += 0.05 * n(rng);
    NoGradGuard guard;
    compute_teacher_potentials(toy.tuples, teacher.embed(toy.tuples.features, Mode::eval, EmbeddingKind::logits),
                               distill_pairs(DistillVariant::csd, 3));
  }
  toy.inputs.tuples = &toy.tuples;
  toy.weights.tau_student = 0.7;
  return toy;
}

}  // namespace detail

/// Criterion group 1: every differentiable op plus the composed objective,
/// `seeds` random draws each, against central differences.
inline CheckResult check_gradients(int seeds = 20, double tol = 1e-4) {
  detail::Timer timer;
  CheckResult res{"gradients", true, "", 0.0};
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(s));
    for (const auto& c : detail::op_cases(rng)) {
      auto rep = detail::check_case(c, rng);
      ++cases;
      if (rep.max_rel_error > worst) {
        worst = rep.max_rel_error;
        worst_name = c.name;
      }
    }
    auto toy = detail::make_toy_objective(static_cast<std::uint64_t>(s),
                                          static_cast<PotentialMetric>(s % 3));
    auto f = [&toy] {
      toy.restore_stats();
      return total_objective(toy.inputs, toy.weights, toy.model).total;
    };
    auto terms = total_objective(toy.inputs, toy.weights, toy.model);
    if (!terms.er.defined() || !terms.dctn.defined() || !terms.dcsd.defined()) {
      res.passed = false;
      res.detail = "toy objective is missing a loss term";
    }
    toy.restore_stats();
    zero_grads(toy.model.parameter_tensors());
    auto rep = finite_difference_check(f, toy.model.parameter_tensors(), 1e-5, tol);
    ++cases;
    if (rep.max_rel_error > worst) {
      worst = rep.max_rel_error;
      worst_name = "total_objective";
    }
  }
  res.seconds = timer.seconds();
  if (!(worst < tol)) res.passed = false;
  res.detail = std::to_string(cases) + " cases, max rel err " + detail::fmt(worst) + " (" + worst_name + ")" +
               (res.detail.empty() ? "" : "; " + res.detail);
  return res;
}

namespace detail {

// Moments of `y` over `axes`, max |mean| and max |var - 1| over groups.
inline std::pair<double, double> moment_errors(const Tensor& y, Axes axes) {
  auto m = reduce_moments(y, axes);
  double em = 0.0, ev = 0.0;
  for (double v : m.mean.values()) em = std::max(em, std::abs(v));
  for (double v : m.var.values()) ev = std::max(ev, std::abs(v - 1.0));
  return {em, ev};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Scalar-loop GN (no affine) followed by train-mode BN with affine.
inline std::vector<double> continual_norm_oracle(const Tensor& x, std::size_t groups, const std::vector<double>& gamma,
                                                 const std::vector<double>& beta, double eps) {
  const Shape& s = x.shape();
  const std::size_t B = s[0], C = s[1], HW = s[2] * s[3], cg = C / groups;
  std::vector<double> g(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t grp = 0; grp < groups; ++grp) {
      double mu = 0.0, var = 0.0;
      const std::size_t n = cg * HW;
      for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c)
        for (std::size_t i = 0; i < HW; ++i) mu += x[(b * C + c) * HW + i];
      mu /= static_cast<double>(n);
      for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = x[(b * C + c) * HW + i] - mu;
          var += d * d;
        }
      var /= static_cast<double>(n);
      for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c)
        for (std::size_t i = 0; i < HW; ++i)
          g[(b * C + c) * HW + i] = (x[(b * C + c) * HW + i] - mu) / std::sqrt(var + eps);
    }
  std::vector<double> out(g.size());
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    const std::size_t n = B * HW;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) mu += g[(b * C + c) * HW + i];
    mu /= static_cast<double>(n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = g[(b * C + c) * HW + i] - mu;
        var += d * d;
      }
    var /= static_cast<double>(n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i)
        out[(b * C + c) * HW + i] = gamma[c] * (g[(b * C + c) * HW + i] - mu) / std::sqrt(var + eps) + beta[c];
  }
  return out;
}

}  // namespace detail

/// Criterion group 2: normalization moments and equivalences.
inline CheckResult check_norm_moments(int seeds = 20) {
  detail::Timer timer;
  CheckResult res{"norm_moments", true, "", 0.0};
  double mean_err = 0.0, var_err = 0.0, equiv_err = 0.0, cn_err = 0.0;
  bool spn_exact = true;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(2000 + static_cast<std::uint64_t>(s));
    Tensor x = detail::normal_tensor(rng, Shape{4, 6, 5, 5}, 1.5, 2.0);
    RunningStats stats = RunningStats::fresh(6, 0.1, 1e-5);
    const std::vector<std::pair<Tensor, Axes>> outs = {
        {batch_norm(x, nullptr, stats, Mode::train), bn_axes()},
        {spatial_norm(x, SpatialKind::in, 1, nullptr, 1e-5), in_axes()},
        {spatial_norm(x, SpatialKind::ln, 1, nullptr, 1e-5), ln_axes()},
    };
    for (const auto& [y, axes] : outs) {
      auto [em, ev] = detail::moment_errors(y, axes);
      mean_err = std::max(mean_err, em);
      var_err = std::max(var_err, ev);
    }
    {
      Tensor y = spatial_norm(x, SpatialKind::gn, 3, nullptr, 1e-5);
      auto [em, ev] = detail::moment_errors(reshape(y, Shape{4, 3, 2 * 5, 5}), in_axes());
      mean_err = std::max(mean_err, em);
      var_err = std::max(var_err, ev);
    }
    equiv_err = std::max(equiv_err, detail::max_abs_diff(spatial_norm(x, SpatialKind::gn, 1, nullptr, 1e-5).values(),
                                                         spatial_norm(x, SpatialKind::ln, 1, nullptr, 1e-5).values()));
    equiv_err = std::max(equiv_err, detail::max_abs_diff(spatial_norm(x, SpatialKind::gn, 6, nullptr, 1e-5).values(),
                                                         spatial_norm(x, SpatialKind::in, 1, nullptr, 1e-5).values()));
    // CN against the two-stage oracle
    {
      AffineParams aff = AffineParams::identity(6);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (double& v : aff.gamma.mutable_values()) v = 1.0 + 0.5 * u(rng);
      for (double& v : aff.beta.mutable_values()) v = u(rng);
      RunningStats cs = RunningStats::fresh(6, 0.1, 1e-5);
      Tensor y = continual_norm(x, 2, &aff, cs, Mode::train);
      auto oracle = detail::continual_norm_oracle(x, 2, {aff.gamma.values().begin(), aff.gamma.values().end()},
                                                  {aff.beta.values().begin(), aff.beta.values().end()}, 1e-5);
      cn_err = std::max(cn_err, detail::max_abs_diff(y.values(), oracle));
    }
    // SPN halves against standalone BN and IN/LN blend
    {
      NormLayer spn(NormConfig{NormKind::spn, 2, 0.1, 1e-5}, 6);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      for (auto& p : spn.parameters("spn"))
        for (double& v : p.tensor.mutable_values()) v += 0.3 * u(rng);
      RunningStats bn_stats = spn.running_stats();
      Tensor y = spn.forward(x, Mode::train);
      auto [stable, plastic] = split_halves(x);
      Tensor a = batch_norm(stable, &spn.affine(), bn_stats, Mode::train);
      Tensor b = inln_combine(plastic, spn.blend(), &spn.affine_aux(), 1e-5);
      auto [ya, yb] = split_halves(y);
      spn_exact = spn_exact && detail::max_abs_diff(ya.values(), a.values()) == 0.0 &&
                  detail::max_abs_diff(yb.values(), b.values()) == 0.0 && bn_stats.mean == spn.running_stats().mean &&
                  bn_stats.var == spn.running_stats().var;
    }
  }
  res.passed = mean_err <= 1e-6 && var_err <= 1e-4 && equiv_err <= 1e-12 && cn_err <= 1e-12 && spn_exact;
  res.detail = "max|mean| " + detail::fmt(mean_err) + ", max|var-1| " + detail::fmt(var_err) + ", GN(1)/GN(C) " +
               detail::fmt(equiv_err) + ", CN vs oracle " + detail::fmt(cn_err) +
               ", SPN halves " + (spn_exact ? "exact" : "DIFFER");
  res.seconds = timer.seconds();
  return res;
}

namespace detail {

// Four stored tasks with `n` samples each (group ids 1..4) plus the same
// rows regrouped as three pseudo-tasks for the task-free variant.
struct StationaritySetup {
  Classifier student;
  DistillTupleSet set;
};

inline StationaritySetup make_stationarity_setup(std::uint64_t seed, DistillVariant variant, PotentialMetric metric,
                                                 double tau) {
  std::mt19937_64 rng(seed);
  StationaritySetup st;
  ClassifierConfig cfg;
  cfg.norm.kind = NormKind::spn;
  cfg.widths = {4, 6};
  cfg.num_classes = 6;
  cfg.feature_shape = Shape{1, 2, 8, 8};
  st.student = Classifier::init(seed, cfg);
  // the snapshot is a value copy; the student is then evaluated against it
  Classifier snapshot = st.student.clone();
  const std::size_t n = 3;
  const std::size_t groups = variant == DistillVariant::tf ? 3 : 4;
  st.set.metric = metric;
  st.set.tau_teacher = tau;
  std::uint64_t next = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    st.set.group_ids.push_back(static_cast<int>(g + 1));
    st.set.group_offsets.push_back(g * n);
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(next++);
    st.set.sample_ids.push_back(ids);
  }
  st.set.features = random_tensor(rng, Shape{groups * n, 2, 8, 8}, 0.0, 2.0, false);
  const auto pairs = variant == DistillVariant::tf ? task_free_pairs(30, 10) : distill_pairs(variant, 5);
  NoGradGuard guard;
  compute_teacher_potentials(st.set, snapshot.embed(st.set.features, Mode::eval, EmbeddingKind::logits), pairs);
  return st;
}

}  // namespace detail

/// Criterion group 3: zero gradient at student == snapshot for every
/// variant and metric (matching teacher/student temperatures), and the KL
/// identity and sign.
inline CheckResult check_distillation(int kl_trials = 1000) {
  detail::Timer timer;
  CheckResult res{"distillation", true, "", 0.0};
  double worst_grad = 0.0;
  std::string worst_case;
  for (auto variant : {DistillVariant::csd, DistillVariant::fsd, DistillVariant::lsd, DistillVariant::tf})
    for (auto metric : {PotentialMetric::cosine, PotentialMetric::l2, PotentialMetric::arccos}) {
      const double tau = 2.0;
      auto st = detail::make_stationarity_setup(7, variant, metric, tau);
      if (st.set.pairs.empty()) {
        res.passed = false;
        worst_case = "empty pair range";
        continue;
      }
      auto params = st.student.parameter_tensors();
      zero_grads(params);
      auto loss = structurewise_distill(st.set, st.student, tau);
      loss.value.backward();
      for (const auto& p : params)
        for (double g : p.grad())
          if (std::abs(g) > worst_grad) {
            worst_grad = std::abs(g);
            worst_case = std::string(to_string(variant)) + "/" + std::string(to_string(metric));
          }
      zero_grads(params);
    }
  std::mt19937_64 rng(3000);
  double kl_self = 0.0, kl_min = INFINITY;
  for (int t = 0; t < kl_trials; ++t) {
    std::uniform_int_distribution<std::size_t> dim(2, 8), rows(1, 4);
    const Shape s{rows(rng), dim(rng)};
    const double scale = t % 2 ? 5.0 : 1.0;
    Tensor a = detail::random_tensor(rng, s, -scale, scale, false);
    Tensor b = detail::random_tensor(rng, s, -scale, scale, false);
    std::uniform_real_distribution<double> tu(0.1, 5.0);
    const double tau = tu(rng);
    kl_self = std::max(kl_self, std::abs(kl_pointwise_distill(a, a, tau).item()));
    kl_min = std::min(kl_min, kl_pointwise_distill(a, b, tau).item());
  }
  res.passed = res.passed && worst_grad < 1e-8 && kl_self <= 1e-12 && kl_min >= 0.0;
  res.detail = "max|grad| at snapshot " + detail::fmt(worst_grad) + (worst_case.empty() ? "" : " (" + worst_case + ")") +
               ", max|KL(p,p)| " + detail::fmt(kl_self) + ", min KL " + detail::fmt(kl_min);
  res.seconds = timer.seconds();
  return res;
}

/// Criterion group 4: potential normalization, scale invariance, the empty
/// t = 2 range, and the task-free loop bounds.
inline CheckResult check_potentials(int trials = 200) {
  detail::Timer timer;
  CheckResult res{"potentials", true, "", 0.0};
  std::mt19937_64 rng(4000);
  double sum_err = 0.0, inv_err = 0.0, l2_change = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::uniform_int_distribution<std::size_t> dim(2, 12), cnt(1, 10);
    const std::size_t d = dim(rng), a = cnt(rng), n = cnt(rng);
    Tensor anchors = detail::random_tensor(rng, Shape{a, d}, -2, 2, false);
    Tensor tuple = detail::random_tensor(rng, Shape{n, d}, -2, 2, false);
    std::uniform_real_distribution<double> scale(0.05, 20.0), tau_u(0.01, 5.0);
    const double tau = tau_u(rng);
    auto rescale = [&](const Tensor& x) {
      auto [m, k] = mufan::detail::rows_of(x);
      std::vector<double> v(x.values().begin(), x.values().end());
      for (std::size_t i = 0; i < m; ++i) {
        const double c = scale(rng);
        for (std::size_t j = 0; j < k; ++j) v[i * k + j] *= c;
      }
      return Tensor(x.shape(), std::move(v));
    };
    Tensor a2 = rescale(anchors), t2 = rescale(tuple);
    for (auto metric : {PotentialMetric::cosine, PotentialMetric::l2, PotentialMetric::arccos}) {
      Tensor p = potential(anchors, tuple, metric, tau);
      for (const auto& row : potential_rows(p)) sum_err = std::max(sum_err, std::abs(row.total() - 1.0));
      Tensor q = potential(a2, t2, metric, tau);
      const double diff = detail::max_abs_diff(p.values(), q.values());
      if (metric == PotentialMetric::l2) l2_change = std::max(l2_change, diff);
      else inv_err = std::max(inv_err, diff);
    }
  }
  // t = 2 under the consecutive-task variant: empty range, loss exactly zero
  bool t2_zero = distill_pairs(DistillVariant::csd, 2).empty();
  {
    auto st = detail::make_stationarity_setup(11, DistillVariant::csd, PotentialMetric::cosine, 1e-4);
    st.set.pairs.clear();
    auto loss = structurewise_distill(st.set, st.student, 2.0);
    t2_zero = t2_zero && loss.empty && loss.value.item() == 0.0;
  }
  // Task-free bounds: j runs over 2 .. u // S.
  bool bounds_ok = true;
  const std::vector<std::pair<std::size_t, std::size_t>> cases = {
      {0, 10}, {9, 10}, {10, 10}, {19, 10}, {20, 10}, {23, 10}, {29, 10}, {30, 10}, {99, 10}, {100, 10},
      {4, 5},  {5, 5},  {9, 5},   {10, 5},  {14, 5},  {15, 5},  {23, 5},  {49, 5},  {7, 1},   {1, 3}};
  for (auto [u, s] : cases) {
    std::vector<std::pair<int, int>> expected;
    long upper = static_cast<long>(u) / static_cast<long>(s);
    for (long j = 2; j <= upper; ++j) expected.emplace_back(static_cast<int>(j - 1), static_cast<int>(j));
    bounds_ok = bounds_ok && task_free_pairs(u, s) == expected;
  }
  bounds_ok = bounds_ok && task_free_pairs(23, 10) == std::vector<std::pair<int, int>>{{1, 2}};
  res.passed = sum_err <= 1e-9 && inv_err <= 1e-9 && l2_change > 1e-6 && t2_zero && bounds_ok;
  res.detail = "max|sum-1| " + detail::fmt(sum_err) + ", cosine/arccos rescale " + detail::fmt(inv_err) +
               ", l2 rescale change " + detail::fmt(l2_change) + ", t=2 CSD " + (t2_zero ? "0" : "NONZERO") +
               ", task-free bounds " + (bounds_ok ? "ok" : "WRONG") + " on " + std::to_string(cases.size()) + " cases";
  res.seconds = timer.seconds();
  return res;
}

namespace detail {

// Plain re-derivation of ACC / FM / LA used as an oracle.
inline Metrics metrics_oracle(const std::vector<std::vector<double>>& a) {
  const std::size_t T = a.size();
  Metrics m;
  double acc = 0.0, la = 0.0, fm = 0.0;
  for (std::size_t j = 0; j < T; ++j) acc += a[T - 1][j];
  for (std::size_t j = 0; j < T; ++j) la += a[j][j];
  for (std::size_t j = 0; j + 1 < T; ++j) {
    std::vector<double> earlier;
    for (std::size_t l = j; l + 1 < T; ++l) earlier.push_back(a[l][j]);
    fm += *std::max_element(earlier.begin(), earlier.end()) - a[T - 1][j];
  }
  m.acc = acc / static_cast<double>(T);
  m.la = la / static_cast<double>(T);
  m.fm = T > 1 ? fm / static_cast<double>(T - 1) : 0.0;
  return m;
}

}  // namespace detail

/// Criterion group 5: compute_metrics against the oracle, and the T = 2
/// worked example.
inline CheckResult check_metrics(int matrices = 50) {
  detail::Timer timer;
  CheckResult res{"metrics", true, "", 0.0};
  std::mt19937_64 rng(5000);
  double worst = 0.0;
  for (int k = 0; k < matrices; ++k) {
    std::uniform_int_distribution<std::size_t> tdist(2, 20);
    const std::size_t T = tdist(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> raw(T);
    AccuracyMatrix m(T);
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j <= i; ++j) raw[i].push_back(u(rng));
      m.set_row(i, raw[i]);
    }
    auto got = compute_metrics(m);
    auto want = detail::metrics_oracle(raw);
    worst = std::max({worst, std::abs(got.acc - want.acc), std::abs(got.fm - want.fm), std::abs(got.la - want.la)});
  }
  AccuracyMatrix ex(2);
  ex.set_row(0, {0.9});
  ex.set_row(1, {0.8, 0.7});
  auto r = compute_metrics(ex);
  const bool example = format_fixed(r.acc) == "0.750000" && format_fixed(r.fm) == "0.100000" &&
                       format_fixed(r.la) == "0.800000" && std::abs(r.acc - 0.75) <= 1e-15 &&
                       std::abs(r.fm - 0.1) <= 1e-15 && std::abs(r.la - 0.8) <= 1e-15;
  res.passed = worst <= 1e-12 && example;
  res.detail = std::to_string(matrices) + " random matrices, max diff " + detail::fmt(worst) + "; T=2 example ACC " +
               format_fixed(r.acc) + " FM " + format_fixed(r.fm) + " LA " + format_fixed(r.la);
  res.seconds = timer.seconds();
  return res;
}

/// Criterion group 6: reservoir inclusion rates per arrival-time decile
/// within the 3-sigma binomial band, and ring FIFO contents.
inline CheckResult check_buffers(int seeds = 200, std::size_t k = 100, std::size_t n = 10000) {
  detail::Timer timer;
  CheckResult res{"buffers", true, "", 0.0};
  const std::size_t bins = 10, per_bin = n / bins;
  std::vector<double> hits(bins, 0.0);
  for (int s = 0; s < seeds; ++s) {
    ReplayBuffer buf(ReplayPolicy::reservoir, k);
    std::mt19937_64 rng(6000 + static_cast<std::uint64_t>(s));
    Sample smp;
    smp.image = {0.0};
    for (std::size_t i = 0; i < n; ++i) {
      smp.id = i;
      smp.label = static_cast<int>(i % 7);
      buf.insert(smp, rng);
    }
    for (const auto* e : buf.entries()) hits[e->sample.id / per_bin] += 1.0;
  }
  const double p = static_cast<double>(k) / static_cast<double>(n);
  const double trials = static_cast<double>(per_bin) * seeds;
  const double sigma = std::sqrt(p * (1.0 - p) / trials);
  double worst_z = 0.0;
  for (double h : hits) worst_z = std::max(worst_z, std::abs(h / trials - p) / sigma);

  // ring: 60 samples of task 1 and 20 of task 2 into K = 50
  ReplayBuffer ring(ReplayPolicy::ring, 50);
  std::mt19937_64 rng(0);
  Sample smp;
  smp.image = {0.0};
  for (std::uint64_t i = 1; i <= 60; ++i) {
    smp.id = i;
    smp.task = 1;
    ring.insert(smp, rng);
  }
  for (std::uint64_t i = 101; i <= 120; ++i) {
    smp.id = i;
    smp.task = 2;
    ring.insert(smp, rng);
  }
  bool ring_ok = true;
  auto t1 = ring.task_entries(1);
  auto t2 = ring.task_entries(2);
  ring_ok = t1.size() == 50 && t2.size() == 20;
  for (std::size_t i = 0; ring_ok && i < t1.size(); ++i) ring_ok = t1[i]->sample.id == 11 + i;
  for (std::size_t i = 0; ring_ok && i < t2.size(); ++i) ring_ok = t2[i]->sample.id == 101 + i;
  res.passed = worst_z <= 3.0 && ring_ok;
  res.detail = "reservoir K=" + std::to_string(k) + " n=" + std::to_string(n) + " x" + std::to_string(seeds) +
               " seeds: worst decile |z| " + detail::fmt(worst_z) + " (band 3); ring holds " +
               (ring_ok ? "samples 11..60 of task 1" : "WRONG contents");
  res.seconds = timer.seconds();
  return res;
}

inline std::vector<CheckResult> run_all() {
  return {check_gradients(), check_norm_moments(), check_distillation(),
          check_potentials(), check_metrics(),     check_buffers()};
}

}  // namespace mufan::checks

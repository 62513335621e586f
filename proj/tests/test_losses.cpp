#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mufan/invariants.hpp"
#include "mufan/losses.hpp"

using namespace mufan;

namespace {

Tensor rows(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor(Shape{r, c}, std::move(v)); }

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  const std::vector<int> labels{2};
  EXPECT_NEAR(ce_loss(rows(1, 4, {0, 0, 0, 0}), labels).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(ce_loss(rows(1, 4, {0, 0, 0, 0}), labels).item(), 1.3863, 1e-4);
}

TEST(CrossEntropy, ConfidentCorrectGoesToZero) {
  const std::vector<int> labels{1};
  EXPECT_LT(ce_loss(rows(1, 3, {0, 60, 0}), labels).item(), 1e-20);
}

TEST(CrossEntropy, MatchesScalarLoop) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> v(5 * 6);
  for (double& x : v) x = n(rng);
  const std::vector<int> labels{0, 5, 3, 3, 1};
  double want = 0.0;
  for (std::size_t b = 0; b < 5; ++b) {
    double mx = -1e300, z = 0.0;
    for (std::size_t k = 0; k < 6; ++k) mx = std::max(mx, v[b * 6 + k]);
    for (std::size_t k = 0; k < 6; ++k) z += std::exp(v[b * 6 + k] - mx);
    want += -(v[b * 6 + static_cast<std::size_t>(labels[b])] - mx - std::log(z));
  }
  EXPECT_NEAR(ce_loss(rows(5, 6, v), labels).item(), want / 5.0, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const std::vector<int> labels{4};
  EXPECT_THROW(ce_loss(rows(1, 4, {0, 0, 0, 0}), labels), LabelOutOfRange);
}

TEST(KlDistill, HandCase) {
  // teacher probs (0.75, 0.25) from logits (ln 3, 0); student uniform
  auto kl = kl_pointwise_distill(rows(1, 2, {std::log(3.0), 0.0}), rows(1, 2, {0.0, 0.0}), 1.0);
  EXPECT_NEAR(kl.item(), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_NEAR(kl.item(), 0.1308, 1e-4);
}

TEST(KlDistill, IdentityAndSign) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 3);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(3 * 4), b(3 * 4);
    for (double& x : a) x = n(rng);
    for (double& x : b) x = n(rng);
    EXPECT_NEAR(kl_pointwise_distill(rows(3, 4, a), rows(3, 4, a), 2.0).item(), 0.0, 1e-12);
    EXPECT_GE(kl_pointwise_distill(rows(3, 4, a), rows(3, 4, b), 2.0).item(), 0.0);
  }
}

TEST(Potential, IdenticalTupleIsUniform) {
  auto p = potential(rows(1, 3, {0.3, -1, 2}), rows(4, 3, std::vector<double>(12, 0.7)), PotentialMetric::cosine, 0.5);
  for (double v : p.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Potential, CosineHandCase) {
  auto p = potential(rows(1, 2, {1, 0}), rows(2, 2, {1, 0, 0, 1}), PotentialMetric::cosine, 1.0);
  EXPECT_NEAR(p.values()[0], 0.7311, 1e-4);
  EXPECT_NEAR(p.values()[1], 0.2689, 1e-4);
}

TEST(Potential, ArccosAndL2Scores) {
  auto s = potential_scores(rows(1, 2, {1, 0}), rows(2, 2, {0, 1, 3, 4}), PotentialMetric::arccos);
  EXPECT_NEAR(s.values()[0], 0.5, 1e-12);  // 90 degrees
  auto d = potential_scores(rows(1, 2, {0, 0}), rows(2, 2, {0, 1, 3, 4}), PotentialMetric::l2);
  EXPECT_NEAR(d.values()[0], 1.0, 1e-12);
  EXPECT_NEAR(d.values()[1], 5.0, 1e-12);
}

TEST(Potential, ZeroVectorRejectedForAngles) {
  EXPECT_THROW(potential(rows(1, 2, {0, 0}), rows(1, 2, {1, 0}), PotentialMetric::cosine, 1.0), ZeroVector);
}

TEST(Potential, PropertiesGroupPasses) {
  auto r = checks::check_potentials(50);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(DistillPairs, Ranges) {
  using P = std::vector<std::pair<int, int>>;
  EXPECT_TRUE(distill_pairs(DistillVariant::csd, 2).empty());
  EXPECT_EQ(distill_pairs(DistillVariant::csd, 4), (P{{1, 2}, {2, 3}}));
  EXPECT_EQ(distill_pairs(DistillVariant::fsd, 4), (P{{1, 2}, {1, 3}}));
  EXPECT_EQ(distill_pairs(DistillVariant::lsd, 5), (P{{4, 2}, {4, 3}}));
  EXPECT_TRUE(distill_pairs(DistillVariant::none, 5).empty());
  EXPECT_EQ(task_free_pairs(23, 10), (P{{1, 2}}));
  EXPECT_TRUE(task_free_pairs(19, 10).empty());
  EXPECT_THROW(task_free_pairs(5, 0), InvalidConfig);
}

TEST(StructureLoss, StationaryAtSnapshot) {
  auto r = checks::check_distillation(200);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(StructureLoss, NonzeroGradientAwayFromSnapshot) {
  auto st = checks::detail::make_stationarity_setup(3, DistillVariant::csd, PotentialMetric::cosine, 2.0);
  for (auto& p : st.student.parameters())
    for (double& v : p.tensor.mutable_values()) v *= 1.3;
  auto params = st.student.parameter_tensors();
  structurewise_distill(st.set, st.student, 2.0).value.backward();
  double mx = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) mx = std::max(mx, std::abs(g));
  EXPECT_GT(mx, 1e-6);
}

TEST(Objective, FirstTaskIsPlainCe) {
  auto toy = checks::detail::make_toy_objective(1);
  ObjectiveInputs in;
  in.current_features = toy.inputs.current_features;
  in.current_labels = toy.inputs.current_labels;
  auto terms = total_objective(in, toy.weights, toy.model);
  toy.restore_stats();
  auto ce = ce_loss(toy.model.forward(in.current_features, Mode::train), in.current_labels);
  EXPECT_EQ(terms.total.item(), ce.item());
  EXPECT_FALSE(terms.er.defined());
}

TEST(Objective, ZeroLambdasIsPlainEr) {
  auto toy = checks::detail::make_toy_objective(2);
  toy.weights.lambda_dctn = 0.0;
  toy.weights.lambda_dcsd = 0.0;
  auto terms = total_objective(toy.inputs, toy.weights, toy.model);
  EXPECT_EQ(terms.total.item(), terms.ce.item() + terms.er.item());
  EXPECT_FALSE(terms.dctn.defined());
  EXPECT_FALSE(terms.dcsd.defined());
}

TEST(Objective, MultiHeadMasksTeacherToo) {
  auto toy = checks::detail::make_toy_objective(4);
  toy.weights.lambda_dcsd = 0.0;
  // replay rows belong to task {2,3} or {0,1}
  const std::vector<std::vector<int>> allowed{{2, 3}, {2, 3}, {2, 3}, {0, 1}};
  std::vector<double> m(16, -1e9);
  for (std::size_t b = 0; b < 4; ++b)
    for (int c : allowed[b]) m[b * 4 + static_cast<std::size_t>(c)] = 0.0;
  toy.inputs.replay_mask = Tensor(Shape{4, 4}, m);
  auto terms = total_objective(toy.inputs, toy.weights, toy.model);
  toy.restore_stats();
  ASSERT_TRUE(terms.dctn.defined());

  NoGradGuard g;
  Tensor logits = toy.model.forward(concat_batch({toy.inputs.current_features, toy.inputs.replay_features}), Mode::train);
  const double tau = toy.weights.tau_dctn;
  double want = 0.0;
  int n = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    const auto& t = toy.inputs.replay_teacher_logits[b];
    if (!t) continue;
    ++n;
    // two-class KL restricted to the task's classes
    const int c0 = allowed[b][0], c1 = allowed[b][1];
    const double s0 = logits.values()[(3 + b) * 4 + static_cast<std::size_t>(c0)] / tau;
    const double s1 = logits.values()[(3 + b) * 4 + static_cast<std::size_t>(c1)] / tau;
    const double t0 = (*t)[static_cast<std::size_t>(c0)] / tau, t1 = (*t)[static_cast<std::size_t>(c1)] / tau;
    const double p0 = 1.0 / (1.0 + std::exp(t1 - t0)), q0 = 1.0 / (1.0 + std::exp(s1 - s0));
    want += p0 * std::log(p0 / q0) + (1 - p0) * std::log((1 - p0) / (1 - q0));
  }
  EXPECT_NEAR(terms.dctn.item(), want / n, 1e-12);
  EXPECT_LT(terms.total.item(), 100.0);
}

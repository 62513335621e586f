#include <gtest/gtest.h>

#include "mufan/gradcheck.hpp"
#include "mufan/invariants.hpp"

using namespace mufan;

TEST(GradCheck, QuadraticIsExact) {
  Tensor x(Shape{1, 3}, {0.5, -1.0, 2.0}, true);
  auto rep = finite_difference_check([&] { return sum(square(x)); }, {x});
  EXPECT_LT(rep.max_rel_error, 1e-9);
  EXPECT_TRUE(rep.passed);
}

TEST(GradCheck, StepOutsideRangeRejected) {
  Tensor x(Shape{1}, {1.0}, true);
  EXPECT_THROW(finite_difference_check([&] { return square(x); }, {x}, 1e-2), InvalidConfig);
}

TEST(GradCheck, SpnOneConvModel) {
  std::mt19937_64 rng(4);
  Tensor x = checks::detail::random_tensor(rng, Shape{3, 2, 4, 4}, -1, 1, false);
  Tensor w = checks::detail::random_tensor(rng, Shape{4, 2, 3, 3}, -0.5, 0.5);
  NormLayer spn(NormConfig{NormKind::spn, 2, 0.1, 1e-5}, 4);
  std::vector<Tensor> params{w};
  for (auto& p : spn.parameters("spn")) params.push_back(p.tensor);
  auto f = [&] { return mean(square(spn.forward(relu(conv2d(x, w, 1, 1)), Mode::train))); };
  auto rep = finite_difference_check(f, params);
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(GradCheck, CorruptedBackwardRuleFails) {
  Tensor a(Shape{1, 3}, {0.5, -1.0, 2.0}, true), b(Shape{1, 3}, {1.5, 0.3, -0.7}, true);
  mufan::testing::inject_backward_fault(true);
  auto rep = finite_difference_check([&] { return sum(mul(a, b)); }, {a, b});
  mufan::testing::inject_backward_fault(false);
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error, 1e-4);
}

TEST(GradCheck, NondeterministicFunctionRejected) {
  Tensor x(Shape{1}, {1.0}, true);
  double drift = 0.0;
  auto f = [&] {
    drift += 1.0;
    return add_scalar(x, drift);
  };
  EXPECT_THROW(finite_difference_check(f, {x}), NondeterministicFunction);
}

// Every op, norm layer, aggregation mode and loss on one seed; the full
// 20-seed sweep runs in the acceptance binary.
TEST(GradCheck, EveryOpOneSeed) {
  std::mt19937_64 rng(99);
  for (const auto& c : checks::detail::op_cases(rng)) {
    auto rep = checks::detail::check_case(c, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4) << c.name;
  }
}

TEST(GradCheck, ComposedObjectiveAllTerms) {
  auto toy = checks::detail::make_toy_objective(5);
  auto terms = total_objective(toy.inputs, toy.weights, toy.model);
  ASSERT_TRUE(terms.er.defined());
  ASSERT_TRUE(terms.dctn.defined());
  ASSERT_TRUE(terms.dcsd.defined());
  auto f = [&] {
    toy.restore_stats();
    return total_objective(toy.inputs, toy.weights, toy.model).total;
  };
  toy.restore_stats();
  auto rep = finite_difference_check(f, toy.model.parameter_tensors());
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

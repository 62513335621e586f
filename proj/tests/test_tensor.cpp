#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mufan/ops.hpp"

using namespace mufan;

namespace {

Tensor vec(std::vector<double> v, bool grad = false) {
  const std::size_t n = v.size();
  return Tensor(Shape{1, n}, std::move(v), grad);
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// brute-force convolution, single batch row
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ks = w.shape();
  const std::size_t wo = (xs[2] + 2 * pad - ks[2]) / stride + 1, ho = (xs[3] + 2 * pad - ks[3]) / stride + 1;
  std::vector<double> out;
  for (std::size_t b = 0; b < xs[0]; ++b)
    for (std::size_t o = 0; o < ks[0]; ++o)
      for (std::size_t i = 0; i < wo; ++i)
        for (std::size_t j = 0; j < ho; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < xs[1]; ++c)
            for (std::size_t u = 0; u < ks[2]; ++u)
              for (std::size_t v = 0; v < ks[3]; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(xs[2]) || q >= static_cast<long>(xs[3])) continue;
                acc += x.at(b, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) * w.at(o, c, u, v);
              }
          out.push_back(acc);
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndValueCountMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeMismatch);
  Tensor t(Shape{2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Ops, AddAndRelu) {
  EXPECT_EQ(vals(add(vec({1, 2}), vec({3, 4}))), (std::vector<double>{4, 6}));
  EXPECT_EQ(vals(relu(vec({-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  EXPECT_THROW(add(vec({1, 2}), vec({1, 2, 3})), ShapeMismatch);
}

TEST(Ops, MulGradientIsOtherFactor) {
  Tensor a = vec({2}, true), b = vec({3}, true);
  sum(mul(a, b)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Ops, SumOfSquaresGradient) {
  Tensor x = vec({1, 2}, true);
  sum(square(x)).backward();
  EXPECT_EQ(vals(Tensor(x.shape(), {x.grad().begin(), x.grad().end()})), (std::vector<double>{2, 4}));
}

TEST(Ops, TwoBackwardCallsAccumulate) {
  Tensor x = vec({1, 2}, true);
  sum(square(x)).backward();
  sum(scalar_mul(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 + 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0 + 3.0);
}

TEST(Ops, BackwardNeedsScalar) {
  Tensor x = vec({1, 2}, true);
  EXPECT_THROW(square(x).backward(), NotScalar);
}

TEST(Ops, NoGradGuardSkipsTape) {
  Tensor x = vec({1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(square(x));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Conv, IdentityOneByOne) {
  Tensor x(Shape{1, 1, 1, 1}, {5.0});
  Tensor w(Shape{1, 1, 1, 1}, {1.0});
  EXPECT_EQ(vals(conv2d(x, w, 1, 0)), (std::vector<double>{5.0}));
}

TEST(Conv, AllOnesKernelWindowSums) {
  Tensor w = Tensor::full(Shape{1, 1, 3, 3}, 1.0);
  EXPECT_EQ(vals(conv2d(Tensor::full(Shape{1, 1, 2, 2}, 1.0), w, 1, 1)), (std::vector<double>{4, 4, 4, 4}));
  // 3x3 ones: corners 4, edges 6, center 9
  EXPECT_EQ(vals(conv2d(Tensor::full(Shape{1, 1, 3, 3}, 1.0), w, 1, 1)),
            (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv, MatchesLoopOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  auto rnd = [&](Shape s) {
    std::vector<double> v(s.numel());
    for (double& x : v) x = u(rng);
    return Tensor(s, v);
  };
  for (std::size_t stride : {1, 2}) {
    Tensor x = rnd(Shape{3, 2, 6, 5}), w = rnd(Shape{4, 2, 3, 3});
    auto got = vals(conv2d(x, w, stride, 1));
    auto want = conv_oracle(x, w, stride, 1);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv, KernelGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> xv(2 * 2 * 5 * 5), wv(3 * 2 * 3 * 3);
  for (double& v : xv) v = u(rng);
  for (double& v : wv) v = u(rng);
  Tensor x(Shape{2, 2, 5, 5}, xv);
  Tensor w(Shape{3, 2, 3, 3}, wv, true);
  sum(conv2d(x, w, 1, 1)).backward();
  for (std::size_t i = 0; i < wv.size(); ++i) {
    auto f = [&](double d) {
      auto v = wv;
      v[i] += d;
      return sum(conv2d(x, Tensor(w.shape(), v), 1, 1)).item();
    };
    const double num = (f(1e-5) - f(-1e-5)) / 2e-5;
    EXPECT_NEAR(w.grad()[i], num, 1e-6 * std::max(1.0, std::abs(num)));
  }
}

TEST(Pool, MaxOfWindow) {
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vals(maxpool2x2(x)), (std::vector<double>{4}));
}

TEST(Upsample, ConstantStaysConstant) {
  auto y = upsample_bilinear2x(Tensor::full(Shape{1, 2, 3, 2}, 1.5));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 4}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(Upsample, RowHalfPixelSampling) {
  // one row (W=1), two columns along H
  auto y = upsample_bilinear2x(Tensor(Shape{1, 1, 1, 2}, {0.0, 2.0}));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> row{0.0, 0.5, 1.5, 2.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(0, 0, r, j), row[j], 1e-15);
}

TEST(Moments, HandExample) {
  auto m = reduce_moments(Tensor(Shape{1, 1, 1, 4}, {1, 3, 5, 7}), Axes::of({0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(m.mean.item(), 4.0);
  EXPECT_DOUBLE_EQ(m.var.item(), 5.0);
  auto c = reduce_moments(Tensor::full(Shape{2, 3, 2, 2}, 7.0), Axes::of({0, 2, 3}));
  for (double v : c.var.values()) EXPECT_EQ(v, 0.0);
}

TEST(Moments, PerChannelMatchesLoop) {
  Tensor x(Shape{2, 2, 1, 1}, {1.0, 10.0, 3.0, 20.0});
  auto m = reduce_moments(x, Axes::of({0, 2, 3}));
  ASSERT_EQ(m.mean.shape(), (Shape{1, 2, 1, 1}));
  for (std::size_t c = 0; c < 2; ++c) {
    const double a = x.at(0, c, 0, 0), b = x.at(1, c, 0, 0);
    const double mu = (a + b) / 2.0;
    EXPECT_EQ(m.mean.values()[c], mu);
    EXPECT_EQ(m.var.values()[c], ((a - mu) * (a - mu) + (b - mu) * (b - mu)) / 2.0);
  }
}

TEST(Split, HalvesAndInverse) {
  std::vector<double> v(2 * 8 * 2 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  Tensor x(Shape{2, 8, 2, 2}, v);
  auto [a, b] = split_halves(x);
  EXPECT_EQ(a.shape()[1], 4u);
  EXPECT_EQ(b.shape()[1], 4u);
  EXPECT_EQ(vals(concat_channels(a, b)), v);
  EXPECT_THROW(split_halves(Tensor::zeros(Shape{1, 7, 1, 1})), OddChannelCount);
}

TEST(Softmax, KnownValues) {
  auto p = softmax(vec({0, 0}), 1, 3.0);
  EXPECT_DOUBLE_EQ(p.values()[0], 0.5);
  auto q = softmax(vec({1, 0}), 1, 1.0);
  EXPECT_NEAR(q.values()[0], 0.7311, 1e-4);
  EXPECT_NEAR(q.values()[1], 0.2689, 1e-4);
  auto r = softmax(vec({1, 0.999}), 1, 1e-4);
  EXPECT_GT(r.values()[0], 0.9999);
}

TEST(Softmax, SumsToOne) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 5);
  std::vector<double> v(4 * 7);
  for (double& x : v) x = n(rng);
  auto p = softmax(Tensor(Shape{4, 7}, v), 1, 0.3);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(p.values()[r * 7 + c], 0.0);
      s += p.values()[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, FiniteOnLegalInputs) {
  auto y = log_softmax(vec({1000.0, -1000.0, 0.0}), 1, 1e-4);
  for (double v : y.values()) EXPECT_FALSE(std::isnan(v));
}

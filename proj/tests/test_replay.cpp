#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "mufan/invariants.hpp"
#include "mufan/replay.hpp"

using namespace mufan;

namespace {

Sample make(std::uint64_t id, int task, int label) {
  Sample s;
  s.image = {static_cast<double>(id)};
  s.id = id;
  s.task = task;
  s.label = label;
  return s;
}

ReplayBuffer filled_ring(std::size_t k, int tasks, std::size_t per_task, int classes_per_task = 2) {
  ReplayBuffer b(ReplayPolicy::ring, k);
  std::mt19937_64 rng(0);
  std::uint64_t id = 0;
  for (int t = 1; t <= tasks; ++t)
    for (std::size_t i = 0; i < per_task; ++i)
      b.insert(make(id++, t, (t - 1) * classes_per_task + static_cast<int>(i) % classes_per_task), rng);
  return b;
}

}  // namespace

TEST(Ring, KeepsLastKPerTask) {
  ReplayBuffer b(ReplayPolicy::ring, 50);
  std::mt19937_64 rng(0);
  for (std::uint64_t i = 1; i <= 60; ++i) b.insert(make(i, 1, 0), rng);
  auto e = b.task_entries(1);
  ASSERT_EQ(e.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(e[i]->sample.id, 11 + i);
}

TEST(Reservoir, FillPhaseStoresEverything) {
  ReplayBuffer b(ReplayPolicy::reservoir, 100);
  std::mt19937_64 rng(1);
  for (std::uint64_t i = 0; i < 100; ++i) b.insert(make(i, 1, 0), rng);
  std::set<std::uint64_t> ids;
  for (const auto* e : b.entries()) ids.insert(e->sample.id);
  EXPECT_EQ(ids.size(), 100u);
}

TEST(Reservoir, InclusionRateInBand) {
  auto r = checks::check_buffers(40);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Sampling, FullDrawIsPermutation) {
  auto b = filled_ring(10, 2, 10);
  std::mt19937_64 rng(2);
  auto d = buffer_sample(b, b.size(), rng);
  std::set<std::size_t> s(d.indices.begin(), d.indices.end());
  EXPECT_EQ(s.size(), b.size());
  EXPECT_FALSE(d.with_replacement);
}

TEST(Sampling, ReproducibleWithSeed) {
  auto b = filled_ring(10, 2, 10);
  std::mt19937_64 r1(3), r2(3);
  EXPECT_EQ(buffer_sample(b, 7, r1).indices, buffer_sample(b, 7, r2).indices);
}

TEST(Sampling, EmptyBufferThrows) {
  ReplayBuffer b(ReplayPolicy::ring, 10);
  std::mt19937_64 rng(0);
  EXPECT_THROW(buffer_sample(b, 3, rng), EmptyBuffer);
}

TEST(Sampling, UniformFrequencies) {
  auto b = filled_ring(10, 2, 10);  // 20 stored
  std::mt19937_64 rng(4);
  std::vector<double> hits(b.size(), 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) hits[buffer_sample(b, 1, rng).indices[0]] += 1.0;
  const double p = 1.0 / static_cast<double>(b.size());
  const double sigma = std::sqrt(draws * p * (1 - p));
  // Bonferroni over 20 cells keeps the false-alarm rate small
  for (double h : hits) EXPECT_LT(std::abs(h - draws * p), 4.0 * sigma);
}

TEST(Tuples, ExhaustiveWhenNEqualsStored) {
  auto b = filled_ring(10, 3, 10);
  std::mt19937_64 rng(5);
  auto sel = select_cross_task_tuples(b, 10, rng);
  ASSERT_EQ(sel.group_ids, (std::vector<int>{1, 2, 3}));
  for (std::size_t g = 0; g < 3; ++g) {
    std::set<std::uint64_t> ids;
    for (const auto& s : sel.groups[g]) ids.insert(s.id);
    EXPECT_EQ(ids.size(), 10u);
  }
}

TEST(Tuples, CapacityArithmetic) {
  auto b = filled_ring(50, 2, 100, 5);
  std::mt19937_64 rng(6);
  EXPECT_NO_THROW(select_cross_task_tuples(b, 10, rng));
  for (std::size_t n : {5, 10, 20}) EXPECT_NO_THROW(select_cross_task_tuples(b, n, rng));
  EXPECT_THROW(select_cross_task_tuples(b, 60, rng), InsufficientSamples);
}

TEST(Tuples, PseudoTasksByArrival) {
  ReplayBuffer b(ReplayPolicy::reservoir, 100);
  std::mt19937_64 rng(7);
  // classes arrive as 5, 3, 9, 1 with three samples each
  std::uint64_t id = 0;
  for (int label : {5, 3, 9, 1})
    for (int i = 0; i < 3; ++i) b.insert(make(id++, 1, label), rng);
  EXPECT_EQ(b.stored_classes(), (std::vector<int>{5, 3, 9, 1}));
  auto sel = select_pseudo_task_tuples(b, 2, 1, rng);
  ASSERT_EQ(sel.group_ids, (std::vector<int>{1, 2}));
  EXPECT_EQ(sel.groups[0][0].label, 5);
  EXPECT_EQ(sel.groups[0][1].label, 3);
  EXPECT_EQ(sel.groups[1][0].label, 9);
  EXPECT_EQ(sel.groups[1][1].label, 1);
}

TEST(Snapshot, CopySemantics) {
  ClassifierConfig cfg;
  cfg.feature_shape = Shape{1, 2, 4, 4};
  cfg.widths = {4, 4};
  cfg.num_classes = 3;
  Classifier live = Classifier::init(1, cfg);
  auto a = store_snapshot(live, 1), b = store_snapshot(live, 1);
  EXPECT_EQ(a.flat_state(), b.flat_state());
  const auto before = a.flat_state();
  for (auto& p : live.parameters())
    for (double& v : p.tensor.mutable_values()) v += 1.0;
  EXPECT_EQ(a.flat_state(), before);
  EXPECT_NE(live.flat_state(), before);
}

TEST(Snapshot, DivergesAfterOneStep) {
  ClassifierConfig cfg;
  cfg.feature_shape = Shape{1, 2, 4, 4};
  cfg.widths = {4, 4};
  cfg.num_classes = 3;
  Classifier live = Classifier::init(2, cfg);
  auto snap = store_snapshot(live, 1);
  std::mt19937_64 rng(8);
  Tensor h = checks::detail::random_tensor(rng, Shape{4, 2, 4, 4}, 0, 1, false);
  const std::vector<int> labels{0, 1, 2, 0};
  const Tensor before = snap.logits(h);
  ce_loss(live.forward(h, Mode::train), labels).backward();
  sgd_step(live.parameter_tensors(), 0.1);
  Tensor l = live.forward(h, Mode::eval), s = snap.logits(h);
  EXPECT_GT(checks::detail::max_abs_diff(l.values(), s.values()), 1e-6);
  EXPECT_EQ(checks::detail::max_abs_diff(before.values(), s.values()), 0.0);
}

TEST(Buffer, DumpWritesPyramidAndLabels) {
  auto b = filled_ring(5, 2, 5);
  const auto path = (std::filesystem::temp_directory_path() / "mufan_dump_test.mfpy").string();
  dump_buffer(b, Shape{1, 1, 1, 1}, path);
  auto p = read_pyramid(path);
  EXPECT_EQ(p[0].shape()[0], 10u);
  EXPECT_TRUE(std::filesystem::exists(path + ".labels"));
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".labels");
}

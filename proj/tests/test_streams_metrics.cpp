#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mufan/invariants.hpp"
#include "mufan/metrics.hpp"
#include "mufan/model.hpp"
#include "mufan/streams.hpp"

using namespace mufan;

namespace {

StreamConfig small(StreamKind kind) {
  StreamConfig c;
  c.kind = kind;
  c.samples = 40;
  c.test_samples = 20;
  return c;
}

std::uint64_t hash_tensor(const Tensor& t) { return hash_values(t.values()); }

}  // namespace

TEST(Streams, DisjointClassSplit) {
  for (auto kind : {StreamKind::gaussian_blobs, StreamKind::rotated_patterns}) {
    auto s = generate_stream(small(kind));
    EXPECT_EQ(s.num_classes, 10u);
    ASSERT_EQ(s.tasks.size(), 5u);
    std::set<int> all;
    for (const auto& t : s.tasks) {
      EXPECT_EQ(t.classes.size(), 2u);
      EXPECT_EQ(t.train.size(), 40u);
      EXPECT_EQ(t.test.size(), 20u);
      for (int c : t.classes) EXPECT_TRUE(all.insert(c).second);
      for (const auto& x : t.train) EXPECT_NE(std::find(t.classes.begin(), t.classes.end(), x.label), t.classes.end());
    }
  }
}

TEST(Streams, SameSeedSameBytes) {
  auto a = generate_stream(small(StreamKind::rotated_patterns));
  auto b = generate_stream(small(StreamKind::rotated_patterns));
  for (std::size_t t = 0; t < a.tasks.size(); ++t)
    for (std::size_t i = 0; i < a.tasks[t].train.size(); ++i) {
      EXPECT_EQ(a.tasks[t].train[i].image, b.tasks[t].train[i].image);
      EXPECT_EQ(a.tasks[t].train[i].label, b.tasks[t].train[i].label);
    }
  auto cfg = small(StreamKind::rotated_patterns);
  cfg.seed = 1;
  EXPECT_NE(generate_stream(cfg).tasks[0].train[0].image, a.tasks[0].train[0].image);
}

TEST(Streams, IdsFollowCanonicalOrder) {
  auto s = generate_stream(small(StreamKind::gaussian_blobs));
  std::uint64_t next = 0;
  for (const auto& t : s.tasks) {
    for (const auto& x : t.train) EXPECT_EQ(x.id, next++);
    for (const auto& x : t.test) EXPECT_EQ(x.id, next++);
  }
  EXPECT_EQ(next, s.total_samples());
}

TEST(Streams, LinearProbeLearnsBlobTask) {
  // softmax regression on raw pixels of task 1, one pass, batch 10
  auto cfg = small(StreamKind::gaussian_blobs);
  cfg.samples = 300;
  auto s = generate_stream(cfg);
  const auto& task = s.tasks[0];
  const std::size_t d = s.image_shape.numel();
  Tensor w = Tensor::zeros(Shape{2, d}, true), bias = Tensor::zeros(Shape{1, 2}, true);
  auto logits = [&](const Tensor& x) {
    return add(matmul_nt(x, w), expand(bias, Shape{x.shape()[0], 2}));
  };
  auto batch = [&](std::size_t from, std::size_t to, std::vector<int>& labels) {
    std::vector<double> v;
    labels.clear();
    for (std::size_t i = from; i < to; ++i) {
      v.insert(v.end(), task.train[i].image.begin(), task.train[i].image.end());
      labels.push_back(task.train[i].label == task.classes[0] ? 0 : 1);
    }
    return Tensor(Shape{to - from, d}, v);
  };
  std::vector<int> labels;
  for (std::size_t i = 0; i < task.train.size(); i += 10) {
    Tensor x = batch(i, i + 10, labels);
    auto lp = log_softmax(logits(x), 1);
    neg(mean(select_labels(lp, labels))).backward();
    sgd_step({w, bias}, 0.05);
  }
  Tensor x = batch(0, task.train.size(), labels);
  auto out = logits(x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    correct += (out.values()[i * 2 + 1] > out.values()[i * 2]) == (labels[i] == 1);
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(labels.size()), 0.9);
}

TEST(Streams, TinyImagesNeedsDirectory) {
  auto cfg = small(StreamKind::tiny_images);
  EXPECT_ANY_THROW(generate_stream(cfg));
}

TEST(Streams, TinyImagesFromPgm) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "mufan_pgm_test";
  fs::remove_all(dir);
  for (int c = 0; c < 4; ++c) {
    fs::create_directories(dir / ("class" + std::to_string(c)));
    for (int i = 0; i < 6; ++i) {
      std::ofstream os(dir / ("class" + std::to_string(c)) / ("img" + std::to_string(i) + ".pgm"));
      os << "P2\n8 8\n255\n";
      for (int p = 0; p < 64; ++p) os << (p * (c + 1) + i) % 256 << ' ';
    }
  }
  StreamConfig cfg;
  cfg.kind = StreamKind::tiny_images;
  cfg.directory = dir.string();
  cfg.tasks = 2;
  cfg.samples = 8;
  cfg.test_samples = 4;
  cfg.width = cfg.height = 16;
  auto s = generate_stream(cfg);
  EXPECT_EQ(s.tasks.size(), 2u);
  EXPECT_EQ(s.image_shape, (Shape{1, 1, 16, 16}));
  EXPECT_EQ(s.tasks[0].train[0].image.size(), 256u);
  fs::remove_all(dir);
}

TEST(Augment, NoneIsIdentity) {
  auto s = generate_stream(small(StreamKind::rotated_patterns));
  Tensor x = stack_images(s.tasks[0].train, s.image_shape);
  std::mt19937_64 rng(0);
  EXPECT_EQ(hash_tensor(augment_batch(x, AugmentOps{}, AugmentScope::none, BatchOrigin::replay, rng)), hash_tensor(x));
}

TEST(Augment, HflipInvolution) {
  std::vector<double> img(2 * 3 * 4);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  EXPECT_EQ(hflip_image(hflip_image(img, 2, 3, 4), 2, 3, 4), img);
  EXPECT_NE(hflip_image(img, 2, 3, 4), img);
}

TEST(Augment, ReplayOnlyTouchesReplayBatches) {
  auto s = generate_stream(small(StreamKind::rotated_patterns));
  Tensor x = stack_images(s.tasks[0].train, s.image_shape);
  std::mt19937_64 rng(1);
  AugmentOps ops;
  EXPECT_EQ(hash_tensor(augment_batch(x, ops, AugmentScope::replay_only, BatchOrigin::stream, rng)), hash_tensor(x));
  EXPECT_NE(hash_tensor(augment_batch(x, ops, AugmentScope::replay_only, BatchOrigin::replay, rng)), hash_tensor(x));
}

TEST(Metrics, WorkedExample) {
  AccuracyMatrix m(2);
  m.set_row(0, {0.9});
  m.set_row(1, {0.8, 0.7});
  auto r = compute_metrics(m);
  EXPECT_NEAR(r.acc, 0.75, 1e-15);
  EXPECT_NEAR(r.fm, 0.1, 1e-15);
  EXPECT_NEAR(r.la, 0.8, 1e-15);
  std::ostringstream os;
  write_metrics_record(os, r);
  EXPECT_EQ(os.str(), "acc = 0.750000\nfm = 0.100000\nla = 0.800000\n");
}

TEST(Metrics, PerfectMatrix) {
  AccuracyMatrix m(3);
  m.set_row(0, {1});
  m.set_row(1, {1, 1});
  m.set_row(2, {1, 1, 1});
  auto r = compute_metrics(m);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_EQ(r.fm, 0.0);
  EXPECT_EQ(r.la, 1.0);
}

TEST(Metrics, BackwardTransferMakesFmNegative) {
  AccuracyMatrix m(2);
  m.set_row(0, {0.5});
  m.set_row(1, {0.9, 0.7});
  EXPECT_LT(compute_metrics(m).fm, 0.0);
}

TEST(Metrics, IncompleteRejected) {
  AccuracyMatrix m(3);
  m.set_row(0, {0.5});
  EXPECT_THROW(compute_metrics(m), IncompleteMatrix);
  EXPECT_THROW(m.set_row(1, {0.5}), InvalidConfig);
  EXPECT_THROW(m.set_row(1, {0.5, 1.5}), DomainError);
}

TEST(Metrics, OracleGroupPasses) {
  auto r = checks::check_metrics();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Metrics, CsvSixDecimals) {
  AccuracyMatrix m(2);
  m.set_row(0, {0.9});
  m.set_row(1, {0.8, 0.7});
  std::ostringstream os;
  write_matrix_csv(os, m);
  EXPECT_EQ(os.str(), "0.900000,\n0.800000,0.700000\n");
  EXPECT_EQ(format_fixed(-0.0000001), "0.000000");
}

TEST(Metrics, MeanStd) {
  auto one = mean_std({0.5});
  EXPECT_FALSE(one.std.has_value());
  auto two = mean_std({1.0, 3.0});
  EXPECT_DOUBLE_EQ(two.mean, 2.0);
  EXPECT_DOUBLE_EQ(*two.std, std::sqrt(2.0));
}

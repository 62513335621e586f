#pragma once

// Synthetic task streams and batch augmentation.
//
// Every generated image is (C, W, H) with values roughly in [0, 1]. Labels
// are global class ids; each task owns a disjoint set of classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "mufan/errors.hpp"
#include "mufan/tensor.hpp"

namespace mufan {

enum class StreamKind { gaussian_blobs, rotated_patterns, tiny_images };

inline std::string_view to_string(StreamKind k) {
  switch (k) {
    case StreamKind::gaussian_blobs: return "gaussian_blobs";
    case StreamKind::rotated_patterns: return "rotated_patterns";
    case StreamKind::tiny_images: return "tiny_images";
  }
  return "?";
}

inline std::optional<StreamKind> parse_stream_kind(std::string_view s) {
  for (auto k : {StreamKind::gaussian_blobs, StreamKind::rotated_patterns, StreamKind::tiny_images})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct StreamConfig {
  StreamKind kind = StreamKind::rotated_patterns;
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t samples = 500;       // training samples per task
  std::size_t test_samples = 200;  // test samples per task
  std::size_t channels = 1;
  std::size_t width = 32;
  std::size_t height = 32;
  double noise = 0.15;
  std::uint64_t seed = 0;
  std::string directory;  // tiny_images only

  bool operator==(const StreamConfig&) const = default;
};

struct Sample {
  std::vector<double> image;  // (C, W, H) row-major
  int label = 0;
  int task = 0;               // 1-based
  std::uint64_t id = 0;       // position in the canonical stream order
};

struct Task {
  int id = 0;  // 1-based
  std::vector<int> classes;
  std::vector<Sample> train;  // in streaming order
  std::vector<Sample> test;
};

struct TaskStream {
  Shape image_shape{1, 1, 32, 32};  // (1, C, W, H)
  std::size_t num_classes = 0;
  std::vector<Task> tasks;

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.train.size() + t.test.size();
    return n;
  }
};

/// Stacks samples into one (B, C, W, H) tensor.
inline Tensor stack_images(const std::vector<const Sample*>& samples, const Shape& image_shape) {
  const std::size_t per = image_shape.numel();
  std::vector<double> v;
  v.reserve(per * samples.size());
  for (const auto* s : samples) {
    if (s->image.size() != per) throw ShapeMismatch("sample image size does not match " + image_shape.str());
    v.insert(v.end(), s->image.begin(), s->image.end());
  }
  return Tensor(Shape{samples.size(), image_shape[1], image_shape[2], image_shape[3]}, std::move(v));
}

inline Tensor stack_images(const std::vector<Sample>& samples, const Shape& image_shape) {
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return stack_images(ptrs, image_shape);
}

/// Bilinear resize of one (C, W, H) image, align_corners = false.
inline std::vector<double> resize_image(const std::vector<double>& img, std::size_t c, std::size_t w,
                                        std::size_t h, std::size_t ow, std::size_t oh) {
  if (w == ow && h == oh) return img;
  std::vector<double> out(c * ow * oh);
  auto src = [](std::size_t o, std::size_t in_n, std::size_t out_n) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < ow; ++x) {
      auto [x0, x1, fx] = src(x, w, ow);
      for (std::size_t y = 0; y < oh; ++y) {
        auto [y0, y1, fy] = src(y, h, oh);
        const double* p = img.data() + ch * w * h;
        const double top = p[x0 * h + y0] * (1 - fy) + p[x0 * h + y1] * fy;
        const double bot = p[x1 * h + y0] * (1 - fy) + p[x1 * h + y1] * fy;
        out[ch * ow * oh + x * oh + y] = top * (1 - fx) + bot * fx;
      }
    }
  return out;
}

namespace detail {

struct Blob {
  double x, y, sigma, amp;
};

// Blobs centred in normalized coordinates [-1, 1]^2.
inline void render_blobs(std::vector<double>& img, std::size_t c, std::size_t w, std::size_t h,
                         const std::vector<Blob>& blobs, const std::vector<double>& channel_gain) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t y = 0; y < h; ++y) {
        const double px = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
        const double py = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
        double v = 0.0;
        for (const auto& b : blobs) {
          const double dx = px - b.x, dy = py - b.y;
          v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        img[ch * w * h + x * h + y] += channel_gain[ch] * v;
      }
}

inline void add_noise(std::vector<double>& img, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : img) v += n(rng);
}

// Per-class generator: returns an image for one draw.
using ClassRenderer = std::function<std::vector<double>(std::mt19937_64&)>;

inline std::vector<int> class_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

inline TaskStream assemble(const StreamConfig& cfg, const std::vector<ClassRenderer>& renderers,
                           const std::vector<int>& class_order, std::mt19937_64& rng) {
  TaskStream s;
  s.image_shape = Shape{1, cfg.channels, cfg.width, cfg.height};
  s.num_classes = cfg.tasks * cfg.classes_per_task;
  std::uint64_t next_id = 0;
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    Task task;
    task.id = static_cast<int>(t + 1);
    for (std::size_t k = 0; k < cfg.classes_per_task; ++k)
      task.classes.push_back(class_order[t * cfg.classes_per_task + k]);
    auto draw = [&](std::size_t count, std::vector<Sample>& out) {
      // Balanced labels, then shuffled into streaming order.
      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = task.classes[i % task.classes.size()];
      std::shuffle(labels.begin(), labels.end(), rng);
      for (int label : labels) {
        Sample smp;
        smp.image = renderers[static_cast<std::size_t>(label)](rng);
        smp.label = label;
        smp.task = task.id;
        smp.id = next_id++;
        out.push_back(std::move(smp));
      }
    };
    draw(cfg.samples, task.train);
    draw(cfg.test_samples, task.test);
    s.tasks.push_back(std::move(task));
  }
  return s;
}

inline TaskStream blobs_stream(const StreamConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  const std::size_t classes = cfg.tasks * cfg.classes_per_task;
  std::uniform_real_distribution<double> pos(-0.6, 0.6), sig(0.12, 0.25), gain(0.5, 1.0);
  std::vector<ClassRenderer> renderers;
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<Blob> blobs;
    for (int b = 0; b < 2; ++b) blobs.push_back({pos(rng), pos(rng), sig(rng), 1.0});
    std::vector<double> g(cfg.channels);
    for (double& v : g) v = gain(rng);
    renderers.push_back([=](std::mt19937_64& r) {
      std::normal_distribution<double> jitter(0.0, 0.05);
      std::vector<Blob> bs = blobs;
      for (auto& b : bs) {
        b.x += jitter(r);
        b.y += jitter(r);
      }
      std::vector<double> img(cfg.channels * cfg.width * cfg.height, 0.0);
      render_blobs(img, cfg.channels, cfg.width, cfg.height, bs, g);
      add_noise(img, cfg.noise, r);
      return img;
    });
  }
  auto order = class_permutation(classes, rng);
  return assemble(cfg, renderers, order, rng);
}

// Shared templates, one per within-task slot; task t shows them rotated by
// pi * (t - 1) / T, so later tasks reuse (and interfere with) earlier
// input statistics.
inline TaskStream rotated_stream(const StreamConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> pos(-0.55, 0.55), sig(0.1, 0.2), sign(0.0, 1.0);
  std::vector<std::vector<Blob>> templates(cfg.classes_per_task);
  for (auto& tpl : templates)
    for (int b = 0; b < 4; ++b) tpl.push_back({pos(rng), pos(rng), sig(rng), sign(rng) < 0.75 ? 1.0 : -0.6});
  std::vector<double> g(cfg.channels, 1.0);
  const std::size_t classes = cfg.tasks * cfg.classes_per_task;
  auto order = class_permutation(classes, rng);
  std::vector<ClassRenderer> renderers(classes);
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    const double theta = std::numbers::pi * static_cast<double>(t) / static_cast<double>(cfg.tasks);
    for (std::size_t k = 0; k < cfg.classes_per_task; ++k) {
      const auto& tpl = templates[k];
      renderers[static_cast<std::size_t>(order[t * cfg.classes_per_task + k])] = [=](std::mt19937_64& r) {
        std::normal_distribution<double> jitter(0.0, 0.08), shift(0.0, 0.05);
        const double a = theta + jitter(r);
        const double ca = std::cos(a), sa = std::sin(a);
        const double dx = shift(r), dy = shift(r);
        std::vector<Blob> bs;
        for (const auto& b : tpl) bs.push_back({ca * b.x - sa * b.y + dx, sa * b.x + ca * b.y + dy, b.sigma, b.amp});
        std::vector<double> img(cfg.channels * cfg.width * cfg.height, 0.0);
        render_blobs(img, cfg.channels, cfg.width, cfg.height, bs, g);
        add_noise(img, cfg.noise, r);
        return img;
      };
    }
  }
  return assemble(cfg, renderers, order, rng);
}

// Binary (P5) or ASCII (P2) greymap, scaled to [0, 1].
inline std::vector<double> read_pgm(const std::filesystem::path& path, std::size_t& w, std::size_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidConfig("cannot open image " + path.string());
  auto token = [&in]() {
    std::string t;
    while (in >> t) {
      if (t[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return t;
    }
    throw InvalidConfig("truncated pgm header");
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P2") throw InvalidConfig(path.string() + ": not a PGM file");
  w = std::stoul(token());
  h = std::stoul(token());
  const double maxval = std::stod(token());
  std::vector<double> raster(w * h);  // file order is row-major (y, x)
  if (magic == "P5") {
    in.get();
    for (auto& v : raster) {
      int c = in.get();
      if (maxval > 255) c = (c << 8) | in.get();
      if (!in) throw InvalidConfig(path.string() + ": truncated pixel data");
      v = c / maxval;
    }
  } else {
    for (auto& v : raster) v = std::stod(token()) / maxval;
  }
  // to (W, H) layout, H fastest
  std::vector<double> img(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img[x * h + y] = raster[y * w + x];
  return img;
}

// <directory>/<class>/*.pgm, class directories sorted by name. The first
// T * classes_per_task classes are used; images are resized to the
// configured dims and split into train/test per the configured counts.
inline TaskStream tiny_images_stream(const StreamConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.directory.empty() || !fs::is_directory(cfg.directory))
    throw InvalidConfig("tiny_images: directory '" + cfg.directory + "' not found");
  if (cfg.channels != 1) throw InvalidConfig("tiny_images: only single-channel greymaps are supported");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(cfg.directory))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  const std::size_t classes = cfg.tasks * cfg.classes_per_task;
  if (class_dirs.size() < classes)
    throw InvalidConfig("tiny_images: need " + std::to_string(classes) + " class directories, found " +
                        std::to_string(class_dirs.size()));
  std::vector<std::vector<std::vector<double>>> pool(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[k]))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::size_t w = 0, h = 0;
      auto img = read_pgm(f, w, h);
      pool[k].push_back(resize_image(img, 1, w, h, cfg.width, cfg.height));
    }
    if (pool[k].empty()) throw InvalidConfig("tiny_images: class directory " + class_dirs[k].string() + " is empty");
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<ClassRenderer> renderers;
  for (std::size_t k = 0; k < classes; ++k) {
    renderers.push_back([&pool, k](std::mt19937_64& r) {
      std::uniform_int_distribution<std::size_t> pick(0, pool[k].size() - 1);
      return pool[k][pick(r)];
    });
  }
  auto order = class_permutation(classes, rng);
  return assemble(cfg, renderers, order, rng);
}

}  // namespace detail

/// Builds a deterministic stream from `cfg`. Throws InvalidConfig.
inline TaskStream generate_stream(const StreamConfig& cfg) {
  if (cfg.width % 16 != 0 || cfg.height % 16 != 0 || cfg.width == 0 || cfg.height == 0)
    throw InvalidConfig("stream: image dims must be positive multiples of 16");
  if (cfg.classes_per_task < 2) throw InvalidConfig("stream: classes_per_task must be at least 2");
  if (cfg.tasks == 0) throw InvalidConfig("stream: need at least one task");
  if (cfg.channels == 0) throw InvalidConfig("stream: channels must be positive");
  if (cfg.samples == 0 || cfg.test_samples == 0) throw InvalidConfig("stream: sample counts must be positive");
  if (cfg.noise < 0) throw InvalidConfig("stream: noise must be non-negative");
  switch (cfg.kind) {
    case StreamKind::gaussian_blobs: return detail::blobs_stream(cfg);
    case StreamKind::rotated_patterns: return detail::rotated_stream(cfg);
    case StreamKind::tiny_images: return detail::tiny_images_stream(cfg);
  }
  throw InvalidConfig("stream: unknown kind");
}

// ---------------------------------------------------------------- augmentation

struct AugmentOps {
  bool crop_pad = true;
  bool hflip = true;
  bool resize = true;
  std::size_t pad = 4;

  bool operator==(const AugmentOps&) const = default;
};

enum class AugmentScope { replay_only, all, none };
enum class BatchOrigin { stream, replay };

inline std::string_view to_string(AugmentScope s) {
  switch (s) {
    case AugmentScope::replay_only: return "replay_only";
    case AugmentScope::all: return "all";
    case AugmentScope::none: return "none";
  }
  return "?";
}

inline std::optional<AugmentScope> parse_augment_scope(std::string_view s) {
  for (auto v : {AugmentScope::replay_only, AugmentScope::all, AugmentScope::none})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

inline std::vector<double> hflip_image(const std::vector<double>& img, std::size_t c, std::size_t w, std::size_t h) {
  std::vector<double> out(img.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t y = 0; y < h; ++y) out[ch * w * h + (w - 1 - x) * h + y] = img[ch * w * h + x * h + y];
  return out;
}

// Zero-pad by `pad` on every side, then crop back at offset (ox, oy) in
// [0, 2 pad].
inline std::vector<double> crop_pad_image(const std::vector<double>& img, std::size_t c, std::size_t w,
                                          std::size_t h, std::size_t pad, std::size_t ox, std::size_t oy) {
  std::vector<double> out(img.size(), 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t y = 0; y < h; ++y) {
        const auto sx = static_cast<std::ptrdiff_t>(x + ox) - static_cast<std::ptrdiff_t>(pad);
        const auto sy = static_cast<std::ptrdiff_t>(y + oy) - static_cast<std::ptrdiff_t>(pad);
        if (sx < 0 || sy < 0 || sx >= static_cast<std::ptrdiff_t>(w) || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        out[ch * w * h + x * h + y] = img[ch * w * h + static_cast<std::size_t>(sx) * h + static_cast<std::size_t>(sy)];
      }
  return out;
}

/// Label-preserving augmentation of a (B, C, W, H) batch. Streaming batches
/// only ever get resized under replay_only; `target_w/h` default to the
/// batch's own dims (resize is then the identity).
inline Tensor augment_batch(const Tensor& batch, const AugmentOps& ops, AugmentScope scope, BatchOrigin origin,
                            std::mt19937_64& rng, std::size_t target_w = 0, std::size_t target_h = 0) {
  const Shape s = batch.shape();
  const std::size_t ow = target_w ? target_w : s[2];
  const std::size_t oh = target_h ? target_h : s[3];
  if (scope == AugmentScope::none) return batch.detach();
  const bool geometric = scope == AugmentScope::all || origin == BatchOrigin::replay;
  const std::size_t per = s[1] * s[2] * s[3];
  std::vector<double> out;
  out.reserve(s[0] * s[1] * ow * oh);
  std::uniform_int_distribution<std::size_t> off(0, 2 * ops.pad);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t b = 0; b < s[0]; ++b) {
    std::vector<double> img(batch.values().begin() + b * per, batch.values().begin() + (b + 1) * per);
    if (geometric && ops.crop_pad && ops.pad > 0) {
      const std::size_t ox = off(rng), oy = off(rng);
      img = crop_pad_image(img, s[1], s[2], s[3], ops.pad, ox, oy);
    }
    if (geometric && ops.hflip && flip(rng)) img = hflip_image(img, s[1], s[2], s[3]);
    if (ops.resize) img = resize_image(img, s[1], s[2], s[3], ow, oh);
    out.insert(out.end(), img.begin(), img.end());
  }
  const std::size_t fw = ops.resize ? ow : s[2];
  const std::size_t fh = ops.resize ? oh : s[3];
  return Tensor(Shape{s[0], s[1], fw, fh}, std::move(out));
}

}  // namespace mufan

#pragma once

// Fixed random-projection encoder producing a four-level feature pyramid,
// plus cross-channel (CCM) and cross-scale (CSM) mixing and the three
// aggregation modes.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mufan/ops.hpp"

namespace mufan {

enum class AggregateMode { standard, bottom_up, top_down };

inline std::string_view to_string(AggregateMode m) {
  switch (m) {
    case AggregateMode::standard: return "standard";
    case AggregateMode::bottom_up: return "bottom_up";
    case AggregateMode::top_down: return "top_down";
  }
  return "?";
}

inline std::optional<AggregateMode> parse_aggregate_mode(std::string_view s) {
  for (auto m : {AggregateMode::standard, AggregateMode::bottom_up, AggregateMode::top_down})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

/// Ordered feature maps, shallow to deep; each level halves the previous
/// level's spatial extent.
struct FeaturePyramid {
  std::vector<Tensor> levels;

  std::size_t size() const { return levels.size(); }
  const Tensor& operator[](std::size_t k) const { return levels[k]; }

  void validate(bool require_four = true) const {
    if (levels.empty()) throw InvalidConfig("feature pyramid has no levels");
    if (require_four && levels.size() != 4)
      throw InvalidConfig("feature pyramid must have exactly 4 levels, got " + std::to_string(levels.size()));
    for (std::size_t k = 1; k < levels.size(); ++k) {
      const Shape& a = levels[k - 1].shape();
      const Shape& b = levels[k].shape();
      if (b[0] != a[0]) throw ShapeMismatch("pyramid levels disagree on batch size");
      if (2 * b[2] != a[2] || 2 * b[3] != a[3])
        throw InvalidConfig("pyramid level " + std::to_string(k) + " is not half the resolution of its predecessor");
      if (b[1] < a[1]) throw InvalidConfig("pyramid channel counts must be non-decreasing");
    }
  }
};

struct EncoderStage {
  Tensor kernel;  // (out, in, 3, 3), stride 2, padding 1, followed by relu
  std::size_t out_channels = 0;
};

struct MixerWeights {
  std::vector<Tensor> ccm;             // per level, (C_k, C_k, 1, 1)
  std::vector<Tensor> csm_top_down;    // k: level k+1 -> level k channels, (C_k, C_{k+1}, 3, 3)
  std::vector<Tensor> csm_bottom_up;   // k: level k -> level k+1 channels, (C_{k+1}, C_k, 3, 3)
  std::optional<Tensor> output_projection;  // optional 1x1 after top-down aggregation
};

namespace detail {
inline Tensor random_kernel(std::mt19937_64& rng, std::size_t out, std::size_t in, std::size_t k) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<double> w(out * in * k * k);
  for (double& v : w) v = dist(rng);
  return Tensor(Shape{out, in, k, k}, std::move(w), false);
}
}  // namespace detail

/// Cross-channel mixing: each level through its own fixed 1x1 conv.
inline FeaturePyramid mix_ccm(const FeaturePyramid& pyramid, const MixerWeights& mixer) {
  if (mixer.ccm.size() < pyramid.size()) throw ShapeMismatch("mix_ccm: fewer CCM kernels than pyramid levels");
  FeaturePyramid out;
  for (std::size_t k = 0; k < pyramid.size(); ++k) {
    const Shape& ks = mixer.ccm[k].shape();
    const std::size_t c = pyramid[k].shape()[1];
    if (ks[0] != c || ks[1] != c)
      throw ShapeMismatch("mix_ccm: level " + std::to_string(k) + " has " + std::to_string(c) +
                          " channels, kernel is " + ks.str());
    out.levels.push_back(conv2d(pyramid[k], mixer.ccm[k], 1, 0));
  }
  return out;
}

/// Merges pyramid levels into one map. top_down walks deep to shallow
/// (bilinear 2x, fixed 3x3 channel-reducing conv, elementwise add) and ends
/// at the shallowest level's shape; bottom_up walks shallow to deep with
/// 2x2 max-pooling and channel-increasing convs; standard keeps CCM of the
/// deepest level only.
inline Tensor aggregate(const FeaturePyramid& pyramid, AggregateMode mode, const MixerWeights& mixer) {
  pyramid.validate(false);
  const std::size_t levels = pyramid.size();
  if (mode == AggregateMode::standard) {
    FeaturePyramid deepest{{pyramid[levels - 1]}};
    MixerWeights only{{mixer.ccm.at(levels - 1)}, {}, {}, std::nullopt};
    return mix_ccm(deepest, only).levels[0];
  }
  FeaturePyramid mixed = mix_ccm(pyramid, mixer);
  auto check_csm = [&](const Tensor& kernel, std::size_t out_c, std::size_t in_c) {
    if (kernel.shape()[0] != out_c || kernel.shape()[1] != in_c)
      throw InvalidConfig("aggregate: CSM kernel " + kernel.shape().str() + " does not map " + std::to_string(in_c) +
                          " to " + std::to_string(out_c) + " channels");
  };
  if (mode == AggregateMode::top_down) {
    if (mixer.csm_top_down.size() < levels - 1) throw InvalidConfig("aggregate: missing top-down CSM kernels");
    Tensor acc = mixed[levels - 1];
    for (std::size_t k = levels - 1; k-- > 0;) {
      const Tensor& kernel = mixer.csm_top_down[k];
      check_csm(kernel, mixed[k].shape()[1], acc.shape()[1]);
      acc = add(mixed[k], conv2d(upsample_bilinear2x(acc), kernel, 1, 1));
    }
    if (mixer.output_projection) acc = conv2d(acc, *mixer.output_projection, 1, 0);
    return acc;
  }
  if (mixer.csm_bottom_up.size() < levels - 1) throw InvalidConfig("aggregate: missing bottom-up CSM kernels");
  Tensor acc = mixed[0];
  for (std::size_t k = 1; k < levels; ++k) {
    const Tensor& kernel = mixer.csm_bottom_up[k - 1];
    check_csm(kernel, mixed[k].shape()[1], acc.shape()[1]);
    acc = add(mixed[k], conv2d(maxpool2x2(acc), kernel, 1, 1));
  }
  return acc;
}

struct EncoderConfig {
  std::size_t input_channels = 1;
  std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
  std::size_t width = 32;
  std::size_t height = 32;
  AggregateMode mode = AggregateMode::top_down;
  std::size_t aggregate_channels = 0;  // 0: channels of the shallowest level
};

/// Frozen encoder: four stride-2 conv+relu stages plus the mixing weights.
/// Nothing here ever requires grad; gradients still flow through to the
/// input when the input requires them.
class Encoder {
 public:
  Encoder() = default;

  static Encoder init(std::uint64_t seed, const EncoderConfig& config) {
    const auto& sc = config.stage_channels;
    if (config.input_channels == 0) throw InvalidConfig("encoder: input_channels must be positive");
    for (std::size_t k = 0; k < 4; ++k) {
      if (sc[k] == 0) throw InvalidConfig("encoder: stage channels must be positive");
      if (k > 0 && sc[k] < sc[k - 1]) throw InvalidConfig("encoder: stage channels must be non-decreasing");
    }
    if (config.width % 16 != 0 || config.height % 16 != 0 || config.width == 0 || config.height == 0) {
      throw InvalidConfig("encoder: input dims " + std::to_string(config.width) + "x" +
                          std::to_string(config.height) + " not divisible by 16");
    }
    Encoder e;
    e.config_ = config;
    std::mt19937_64 rng(seed);
    std::size_t in = config.input_channels;
    for (std::size_t k = 0; k < 4; ++k) {
      e.stages_.push_back({detail::random_kernel(rng, sc[k], in, 3), sc[k]});
      in = sc[k];
    }
    for (std::size_t k = 0; k < 4; ++k) e.mixer_.ccm.push_back(detail::random_kernel(rng, sc[k], sc[k], 1));
    for (std::size_t k = 0; k + 1 < 4; ++k)
      e.mixer_.csm_top_down.push_back(detail::random_kernel(rng, sc[k], sc[k + 1], 3));
    for (std::size_t k = 0; k + 1 < 4; ++k)
      e.mixer_.csm_bottom_up.push_back(detail::random_kernel(rng, sc[k + 1], sc[k], 3));
    if (config.aggregate_channels != 0 && config.aggregate_channels != sc[0])
      e.mixer_.output_projection = detail::random_kernel(rng, config.aggregate_channels, sc[0], 1);
    return e;
  }

  const EncoderConfig& config() const { return config_; }
  const std::vector<EncoderStage>& stages() const { return stages_; }
  const MixerWeights& mixer() const { return mixer_; }
  MixerWeights& mixer() { return mixer_; }

  FeaturePyramid extract_pyramid(const Tensor& image) const {
    const Shape& s = image.shape();
    if (s[1] != config_.input_channels)
      throw ShapeMismatch("encoder expects " + std::to_string(config_.input_channels) + " input channels, got " +
                          s.str());
    if (s[2] % 16 != 0 || s[3] % 16 != 0) throw ShapeMismatch("encoder input dims must be divisible by 16: " + s.str());
    FeaturePyramid p;
    Tensor x = image;
    for (const auto& stage : stages_) {
      x = relu(conv2d(x, stage.kernel, 2, 1));
      p.levels.push_back(x);
    }
    return p;
  }

  Tensor encode(const Tensor& image) const { return aggregate(extract_pyramid(image), config_.mode, mixer_); }

  /// Shape (C, W, H) of one encoded sample.
  Shape feature_shape() const {
    const auto& sc = config_.stage_channels;
    switch (config_.mode) {
      case AggregateMode::top_down:
        return {1, config_.aggregate_channels ? config_.aggregate_channels : sc[0], config_.width / 2,
                config_.height / 2};
      default:
        return {1, sc[3], config_.width / 16, config_.height / 16};
    }
  }

  /// Every frozen kernel value in a fixed order; used for frozenness checks.
  std::vector<double> flat_weights() const {
    std::vector<double> out;
    auto put = [&](const Tensor& t) { out.insert(out.end(), t.values().begin(), t.values().end()); };
    for (const auto& s : stages_) put(s.kernel);
    for (const auto& t : mixer_.ccm) put(t);
    for (const auto& t : mixer_.csm_top_down) put(t);
    for (const auto& t : mixer_.csm_bottom_up) put(t);
    if (mixer_.output_projection) put(*mixer_.output_projection);
    return out;
  }

 private:
  EncoderConfig config_;
  std::vector<EncoderStage> stages_;
  MixerWeights mixer_;
};

inline Encoder init_encoder(std::uint64_t seed, const EncoderConfig& config) { return Encoder::init(seed, config); }

// ---------------------------------------------------------------- pyramid container file
//
// 16-byte header: "MFPY", version u32, level count u32, reserved u32.
// Per level: four u32 dims (B, C, W, H) then row-major float64 values.
// All integers and floats little-endian.

inline constexpr std::uint32_t kPyramidFileVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw InvalidConfig("pyramid file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InvalidConfig("pyramid file truncated");
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline void write_pyramid(std::ostream& os, const FeaturePyramid& pyramid) {
  os.write("MFPY", 4);
  detail::put_u32(os, kPyramidFileVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(pyramid.size()));
  detail::put_u32(os, 0);
  for (const auto& level : pyramid.levels) {
    for (std::size_t ax = 0; ax < 4; ++ax) detail::put_u32(os, static_cast<std::uint32_t>(level.shape()[ax]));
    for (double v : level.values()) detail::put_f64(os, v);
  }
}

inline void write_pyramid(const std::string& path, const FeaturePyramid& pyramid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidConfig("cannot open '" + path + "' for writing");
  write_pyramid(os, pyramid);
}

inline FeaturePyramid read_pyramid(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "MFPY") throw InvalidConfig("not a pyramid file (bad magic)");
  const auto version = detail::get_u32(is);
  if (version != kPyramidFileVersion) throw InvalidConfig("unsupported pyramid file version " + std::to_string(version));
  const auto count = detail::get_u32(is);
  detail::get_u32(is);  // reserved
  FeaturePyramid p;
  for (std::uint32_t k = 0; k < count; ++k) {
    Shape s;
    for (std::size_t ax = 0; ax < 4; ++ax) s[ax] = detail::get_u32(is);
    if (s.numel() == 0) throw InvalidConfig("pyramid level with zero extent");
    std::vector<double> v(s.numel());
    for (double& x : v) x = detail::get_f64(is);
    p.levels.emplace_back(s, std::move(v));
  }
  return p;
}

inline FeaturePyramid read_pyramid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidConfig("cannot open pyramid file '" + path + "'");
  return read_pyramid(is);
}

}  // namespace mufan

#pragma once

// Normalization layers: BN, IN, LN, GN, SN, CN and the split
// stability-plasticity module (BN on one channel half, a learned IN/LN
// blend on the other).

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mufan/ops.hpp"

namespace mufan {

enum class Mode { train, eval };

enum class NormKind { bn, in, ln, gn, sn, cn, spn };

inline std::string_view to_string(NormKind k) {
  switch (k) {
    case NormKind::bn: return "bn";
    case NormKind::in: return "in";
    case NormKind::ln: return "ln";
    case NormKind::gn: return "gn";
    case NormKind::sn: return "sn";
    case NormKind::cn: return "cn";
    case NormKind::spn: return "spn";
  }
  return "?";
}

inline std::optional<NormKind> parse_norm_kind(std::string_view s) {
  for (auto k : {NormKind::bn, NormKind::in, NormKind::ln, NormKind::gn, NormKind::sn, NormKind::cn, NormKind::spn})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct NormConfig {
  NormKind kind = NormKind::spn;
  std::size_t groups = 2;  // GN and CN only
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel scale and shift, stored as (1,C,1,1). gamma = 1, beta = 0.
struct AffineParams {
  Tensor gamma;
  Tensor beta;

  static AffineParams identity(std::size_t channels) {
    return {Tensor::full(Shape{1, channels}, 1.0, true), Tensor::zeros(Shape{1, channels}, true)};
  }
  std::size_t channels() const { return gamma.shape()[1]; }
  AffineParams clone() const { return {gamma.clone(), beta.clone()}; }
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static RunningStats fresh(std::size_t channels, double momentum, double epsilon) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), momentum, epsilon};
  }
  void update(std::span<const double> batch_mean, std::span<const double> batch_var) {
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = (1.0 - momentum) * mean[c] + momentum * batch_mean[c];
      var[c] = (1.0 - momentum) * var[c] + momentum * batch_var[c];
    }
  }
  Tensor mean_tensor() const { return Tensor(Shape{1, mean.size()}, mean); }
  Tensor var_tensor() const { return Tensor(Shape{1, var.size()}, var); }
};

/// Trainable blend logits for means and variances; exposed weights are
/// their softmaxes, so each weight set sums to one.
struct BlendWeights {
  Tensor logits_mean;
  Tensor logits_var;

  static BlendWeights uniform(std::size_t branches) {
    return {Tensor::zeros(Shape{branches}, true), Tensor::zeros(Shape{branches}, true)};
  }
  Tensor mean_weights() const { return softmax(logits_mean, 0); }
  Tensor var_weights() const { return softmax(logits_var, 0); }
  BlendWeights clone() const { return {logits_mean.clone(), logits_var.clone()}; }
};

// ---------------------------------------------------------------- building blocks

inline Tensor apply_affine(const Tensor& x, const AffineParams& affine) {
  if (affine.channels() != x.shape()[1]) {
    throw ShapeMismatch("affine params govern " + std::to_string(affine.channels()) + " channels, input has " +
                        std::to_string(x.shape()[1]));
  }
  return add(mul(x, expand(affine.gamma, x.shape())), expand(affine.beta, x.shape()));
}

/// (x - mean) / sqrt(var + eps) with mean and var broadcast to x's shape.
inline Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& var, double eps) {
  auto inv_std = reciprocal(sqrt(add_scalar(var, eps)));
  return mul(sub(x, expand(mean, x.shape())), expand(inv_std, x.shape()));
}

inline Axes bn_axes() { return Axes::of({0, 2, 3}); }
inline Axes in_axes() { return Axes::of({2, 3}); }
inline Axes ln_axes() { return Axes::of({1, 2, 3}); }

/// Batch normalization. Train mode normalizes with batch moments over
/// (B,W,H) and folds them into `stats`; eval mode uses `stats`.
inline Tensor batch_norm(const Tensor& x, const AffineParams* affine, RunningStats& stats, Mode mode) {
  if (stats.mean.size() != x.shape()[1]) throw ShapeMismatch("batch_norm: running stats channel count mismatch");
  Tensor out;
  if (mode == Mode::train) {
    auto m = reduce_moments(x, bn_axes());
    stats.update(m.mean.values(), m.var.values());
    out = standardize(x, m.mean, m.var, stats.epsilon);
  } else {
    out = standardize(x, stats.mean_tensor(), stats.var_tensor(), stats.epsilon);
  }
  return affine ? apply_affine(out, *affine) : out;
}

enum class SpatialKind { in, ln, gn };

/// IN, LN or GN. Stateless: train and eval are identical.
inline Tensor spatial_norm(const Tensor& x, SpatialKind kind, std::size_t groups, const AffineParams* affine,
                           double eps) {
  const Shape& s = x.shape();
  Tensor out;
  if (kind == SpatialKind::gn) {
    if (groups == 0 || s[1] % groups != 0) {
      throw InvalidConfig("group norm: " + std::to_string(groups) + " groups do not divide " +
                          std::to_string(s[1]) + " channels");
    }
    Tensor grouped = reshape(x, Shape{s[0], groups, (s[1] / groups) * s[2], s[3]});
    auto m = reduce_moments(grouped, in_axes());
    out = reshape(standardize(grouped, m.mean, m.var, eps), s);
  } else {
    auto m = reduce_moments(x, kind == SpatialKind::in ? in_axes() : ln_axes());
    out = standardize(x, m.mean, m.var, eps);
  }
  return affine ? apply_affine(out, *affine) : out;
}

namespace detail {
inline Tensor blend(const std::vector<Tensor>& parts, const Tensor& weights, Shape target) {
  Tensor acc;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    Tensor term = scale_by(expand(parts[k], target), element(weights, k));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}
}  // namespace detail

/// Normalizes with blended IN and LN moments: mean weights w, variance
/// weights w', both softmaxes of trainable logits.
inline Tensor inln_combine(const Tensor& x, const BlendWeights& blend, const AffineParams* affine, double eps) {
  const Shape& s = x.shape();
  if (blend.logits_mean.numel() != 2 || blend.logits_var.numel() != 2)
    throw InvalidConfig("inln_combine expects two-way blend weights");
  auto in = reduce_moments(x, in_axes());
  auto ln = reduce_moments(x, ln_axes());
  Shape stat_shape{s[0], s[1]};
  Tensor mu = detail::blend({in.mean, ln.mean}, blend.mean_weights(), stat_shape);
  Tensor var = detail::blend({in.var, ln.var}, blend.var_weights(), stat_shape);
  Tensor out = standardize(x, mu, var, eps);
  return affine ? apply_affine(out, *affine) : out;
}

/// Switchable normalization over the BN/IN/LN moment triple.
inline Tensor switchable_norm(const Tensor& x, const BlendWeights& blend, const AffineParams* affine,
                              RunningStats& stats, Mode mode) {
  const Shape& s = x.shape();
  if (blend.logits_mean.numel() != 3 || blend.logits_var.numel() != 3)
    throw InvalidConfig("switchable_norm expects three-way blend weights");
  Tensor bn_mean, bn_var;
  if (mode == Mode::train) {
    auto m = reduce_moments(x, bn_axes());
    stats.update(m.mean.values(), m.var.values());
    bn_mean = m.mean;
    bn_var = m.var;
  } else {
    bn_mean = stats.mean_tensor();
    bn_var = stats.var_tensor();
  }
  auto in = reduce_moments(x, in_axes());
  auto ln = reduce_moments(x, ln_axes());
  Shape stat_shape{s[0], s[1]};
  Tensor mu = detail::blend({bn_mean, in.mean, ln.mean}, blend.mean_weights(), stat_shape);
  Tensor var = detail::blend({bn_var, in.var, ln.var}, blend.var_weights(), stat_shape);
  Tensor out = standardize(x, mu, var, stats.epsilon);
  return affine ? apply_affine(out, *affine) : out;
}

/// GN without affine, then BN with affine; BN statistics track the
/// group-normalized activations.
inline Tensor continual_norm(const Tensor& x, std::size_t groups, const AffineParams* affine, RunningStats& stats,
                             Mode mode) {
  Tensor grouped = spatial_norm(x, SpatialKind::gn, groups, nullptr, stats.epsilon);
  return batch_norm(grouped, affine, stats, mode);
}

// ---------------------------------------------------------------- layer

class NormLayer {
 public:
  NormLayer() = default;

  NormLayer(NormConfig config, std::size_t channels) : config_(config), channels_(channels) {
    switch (config.kind) {
      case NormKind::spn:
        if (channels % 2 != 0)
          throw OddChannelCount("SPN needs an even channel count, got " + std::to_string(channels));
        affine_ = AffineParams::identity(channels / 2);
        affine_aux_ = AffineParams::identity(channels / 2);
        stats_ = RunningStats::fresh(channels / 2, config.momentum, config.epsilon);
        blend_ = BlendWeights::uniform(2);
        break;
      case NormKind::sn:
        affine_ = AffineParams::identity(channels);
        stats_ = RunningStats::fresh(channels, config.momentum, config.epsilon);
        blend_ = BlendWeights::uniform(3);
        break;
      case NormKind::gn:
      case NormKind::cn:
        if (config.groups == 0 || channels % config.groups != 0) {
          throw InvalidConfig(std::to_string(config.groups) + " groups do not divide " + std::to_string(channels) +
                              " channels");
        }
        affine_ = AffineParams::identity(channels);
        stats_ = RunningStats::fresh(channels, config.momentum, config.epsilon);
        break;
      default:
        affine_ = AffineParams::identity(channels);
        stats_ = RunningStats::fresh(channels, config.momentum, config.epsilon);
    }
  }

  NormKind kind() const { return config_.kind; }
  const NormConfig& config() const { return config_; }
  std::size_t channels() const { return channels_; }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.shape()[1] != channels_) {
      throw ShapeMismatch("norm layer expects " + std::to_string(channels_) + " channels, got " + x.shape().str());
    }
    const double eps = config_.epsilon;
    switch (config_.kind) {
      case NormKind::bn: return batch_norm(x, &affine_, stats_, mode);
      case NormKind::in: return spatial_norm(x, SpatialKind::in, 1, &affine_, eps);
      case NormKind::ln: return spatial_norm(x, SpatialKind::ln, 1, &affine_, eps);
      case NormKind::gn: return spatial_norm(x, SpatialKind::gn, config_.groups, &affine_, eps);
      case NormKind::sn: return switchable_norm(x, blend_, &affine_, stats_, mode);
      case NormKind::cn: return continual_norm(x, config_.groups, &affine_, stats_, mode);
      case NormKind::spn: {
        auto [stable, plastic] = split_halves(x);
        return concat_channels(batch_norm(stable, &affine_, stats_, mode),
                               inln_combine(plastic, blend_, &affine_aux_, eps));
      }
    }
    throw InvalidConfig("unknown norm kind");
  }

  /// Trainable tensors, named under `prefix`.
  std::vector<Parameter> parameters(const std::string& prefix) const {
    std::vector<Parameter> out{{prefix + ".gamma", affine_.gamma}, {prefix + ".beta", affine_.beta}};
    if (config_.kind == NormKind::spn) {
      out.push_back({prefix + ".gamma_inln", affine_aux_.gamma});
      out.push_back({prefix + ".beta_inln", affine_aux_.beta});
    }
    if (config_.kind == NormKind::spn || config_.kind == NormKind::sn) {
      out.push_back({prefix + ".blend_mean", blend_.logits_mean});
      out.push_back({prefix + ".blend_var", blend_.logits_var});
    }
    return out;
  }

  NormLayer clone() const {
    NormLayer copy = *this;
    copy.affine_ = affine_.clone();
    if (affine_aux_.gamma.defined()) copy.affine_aux_ = affine_aux_.clone();
    if (blend_.logits_mean.defined()) copy.blend_ = blend_.clone();
    return copy;
  }

  /// BN-side running statistics (the BN half for SPN; unused by IN/LN/GN).
  const RunningStats& running_stats() const { return stats_; }
  RunningStats& running_stats() { return stats_; }
  AffineParams& affine() { return affine_; }
  AffineParams& affine_aux() { return affine_aux_; }
  BlendWeights& blend() { return blend_; }
  const BlendWeights& blend() const { return blend_; }

 private:
  NormConfig config_;
  std::size_t channels_ = 0;
  AffineParams affine_;
  AffineParams affine_aux_;  // SPN plastic half
  RunningStats stats_;
  BlendWeights blend_;
};

}  // namespace mufan

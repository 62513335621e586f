#pragma once

// Differentiable tensor operations. Each op computes its forward values
// eagerly and, when recording, captures what its backward rule needs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mufan/tensor.hpp"

namespace mufan {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
  }
}

template <class Forward, class Derivative>
Tensor unary(const Tensor& a, Forward f, Derivative df) {
  auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * df(p.values[i], self.values[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double fault = testing::backward_fault_injected() ? 1.01 : 1.0;
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += fault * self.grad[i] * pb.values[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += fault * self.grad[i] * pa.values[i];
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == 0.0) throw DomainError("div: division by zero");
    out[i] = a[i] / b[i];
  }
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] / pb.values[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i] * self.values[i] / pb.values[i];
    }
  });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value");
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError("sqrt requires strictly positive inputs");
  }
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}

inline Tensor reciprocal(const Tensor& a) {
  for (double v : a.values()) {
    if (v == 0.0) throw DomainError("reciprocal of zero");
  }
  return detail::unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// arccos with inputs clamped into [-1 + 1e-7, 1 - 1e-7]; clamped entries
/// get zero gradient.
inline Tensor arccos(const Tensor& a) {
  static constexpr double lim = 1.0 - 1e-7;
  return detail::unary(
      a, [](double x) { return std::acos(std::clamp(x, -lim, lim)); },
      [](double x, double) { return (x <= -lim || x >= lim) ? 0.0 : -1.0 / std::sqrt(1.0 - x * x); });
}

enum class ElementwiseKind { add, sub, mul, scalar_mul, relu, exp, log, neg };

/// Dispatcher over the basic elementwise family. `b` is ignored by unary
/// kinds; `scalar` is used by scalar_mul.
inline Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor& b = {}, double scalar = 1.0) {
  switch (kind) {
    case ElementwiseKind::add: return add(a, b);
    case ElementwiseKind::sub: return sub(a, b);
    case ElementwiseKind::mul: return mul(a, b);
    case ElementwiseKind::scalar_mul: return scalar_mul(a, scalar);
    case ElementwiseKind::relu: return relu(a);
    case ElementwiseKind::exp: return exp(a);
    case ElementwiseKind::log: return log(a);
    case ElementwiseKind::neg: return neg(a);
  }
  throw InvalidConfig("unknown elementwise kind");
}

/// a * s where s is a one-element tensor; differentiable in both.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeMismatch("scale_by expects a one-element scale, got " + s.shape().str());
  const double sv = s[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  return Tensor::make_result(a.shape(), std::move(out), {a, s}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    const double sv = ps.values[0];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * sv;
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.values[i];
      ps.grad[0] += acc;
    }
  });
}

// ---------------------------------------------------------------- shape ops

namespace detail {

inline std::size_t flat_index(const Shape& s, std::size_t b, std::size_t c, std::size_t w, std::size_t h) {
  return ((b * s[1] + c) * s[2] + w) * s[3] + h;
}

// Maps every index of `big` onto the index of `small` obtained by pinning
// the extent-1 axes of `small` to zero.
inline std::vector<std::size_t> broadcast_map(const Shape& small, const Shape& big) {
  std::vector<std::size_t> map(big.numel());
  std::size_t i = 0;
  for (std::size_t b = 0; b < big[0]; ++b)
    for (std::size_t c = 0; c < big[1]; ++c)
      for (std::size_t w = 0; w < big[2]; ++w)
        for (std::size_t h = 0; h < big[3]; ++h)
          map[i++] = flat_index(small, small[0] == 1 ? 0 : b, small[1] == 1 ? 0 : c,
                                small[2] == 1 ? 0 : w, small[3] == 1 ? 0 : h);
  return map;
}

}  // namespace detail

/// Repeats extent-1 axes of `a` to reach `target`.
inline Tensor expand(const Tensor& a, Shape target) {
  for (std::size_t ax = 0; ax < 4; ++ax) {
    if (a.shape()[ax] != target[ax] && a.shape()[ax] != 1) {
      throw ShapeMismatch("expand: cannot expand " + a.shape().str() + " to " + target.str());
    }
  }
  if (a.shape() == target) return a;
  auto map = detail::broadcast_map(a.shape(), target);
  std::vector<double> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = a[map[i]];
  return Tensor::make_result(target, std::move(out), {a}, [map = std::move(map)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < map.size(); ++i) p.grad[map[i]] += self.grad[i];
  });
}

inline Tensor reshape(const Tensor& a, Shape target) {
  if (target.numel() != a.numel()) {
    throw ShapeMismatch("reshape: " + a.shape().str() + " to " + target.str());
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tensor::make_result(target, std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return Tensor::make_result(Shape{1}, {acc}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Axis set as a bitmask over (B, C, W, H).
struct Axes {
  unsigned mask = 0;
  static constexpr Axes of(std::initializer_list<int> list) {
    Axes a;
    for (int ax : list) a.mask |= 1u << ax;
    return a;
  }
  constexpr bool has(std::size_t ax) const { return (mask >> ax) & 1u; }
  constexpr bool empty() const { return mask == 0; }
};

namespace detail {
inline Shape reduced_shape(const Shape& s, Axes axes) {
  Shape r = s;
  for (std::size_t ax = 0; ax < 4; ++ax)
    if (axes.has(ax)) r[ax] = 1;
  return r;
}
}  // namespace detail

/// Sum over `axes`, keeping reduced axes with extent 1.
inline Tensor sum_axes(const Tensor& a, Axes axes) {
  if (axes.empty()) throw InvalidConfig("sum_axes: empty axis set");
  Shape rs = detail::reduced_shape(a.shape(), axes);
  auto map = detail::broadcast_map(rs, a.shape());
  std::vector<double> out(rs.numel(), 0.0);
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += a[i];
  return Tensor::make_result(rs, std::move(out), {a}, [map = std::move(map)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < map.size(); ++i) p.grad[i] += self.grad[map[i]];
  });
}

struct Moments {
  Tensor mean;
  Tensor var;
};

/// Mean and biased (1/n) variance over `axes`; reduced axes kept with extent 1.
inline Moments reduce_moments(const Tensor& a, Axes axes) {
  if (axes.empty()) throw InvalidConfig("reduce_moments: empty axis set");
  Shape rs = detail::reduced_shape(a.shape(), axes);
  const double n = static_cast<double>(a.numel() / rs.numel());
  auto map = std::make_shared<std::vector<std::size_t>>(detail::broadcast_map(rs, a.shape()));
  std::vector<double> m(rs.numel(), 0.0), v(rs.numel(), 0.0);
  for (std::size_t i = 0; i < map->size(); ++i) m[(*map)[i]] += a[i];
  for (double& x : m) x /= n;
  for (std::size_t i = 0; i < map->size(); ++i) {
    const double d = a[i] - m[(*map)[i]];
    v[(*map)[i]] += d * d;
  }
  for (double& x : v) x /= n;

  Tensor mean_t = Tensor::make_result(rs, m, {a}, [map, n](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < map->size(); ++i) p.grad[i] += self.grad[(*map)[i]] / n;
  });
  Tensor var_t = Tensor::make_result(rs, std::move(v), {a}, [map, n, m = std::move(m)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < map->size(); ++i) {
      const std::size_t r = (*map)[i];
      p.grad[i] += self.grad[r] * 2.0 * (p.values[i] - m[r]) / n;
    }
  });
  return {mean_t, var_t};
}

/// One element of `a` as a differentiable one-element tensor.
inline Tensor element(const Tensor& a, std::size_t index) {
  if (index >= a.numel()) throw ShapeMismatch("element: index out of range");
  return Tensor::make_result(Shape{1}, {a[index]}, {a}, [index](detail::Node& self) {
    self.parents[0]->grad[index] += self.grad[0];
  });
}

// ---------------------------------------------------------------- channel / batch plumbing

inline std::pair<Tensor, Tensor> split_halves(const Tensor& a) {
  const Shape& s = a.shape();
  if (s[1] % 2 != 0) throw OddChannelCount("split_halves: channel count " + std::to_string(s[1]) + " is odd");
  const std::size_t half = s[1] / 2;
  const std::size_t plane = s.spatial();
  Shape hs{s[0], half, s[2], s[3]};
  auto slice = [&](std::size_t c0) {
    std::vector<double> out(hs.numel());
    for (std::size_t b = 0; b < s[0]; ++b)
      std::copy_n(a.values().begin() + (b * s[1] + c0) * plane, half * plane,
                  out.begin() + b * half * plane);
    return Tensor::make_result(hs, std::move(out), {a}, [c0, half, plane, s](detail::Node& self) {
      auto& p = *self.parents[0];
      for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t k = 0; k < half * plane; ++k)
          p.grad[(b * s[1] + c0) * plane + k] += self.grad[b * half * plane + k];
    });
  };
  return {slice(0), slice(half)};
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw ShapeMismatch("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  const std::size_t plane = sa.spatial();
  Shape os{sa[0], sa[1] + sb[1], sa[2], sa[3]};
  std::vector<double> out(os.numel());
  for (std::size_t n = 0; n < sa[0]; ++n) {
    std::copy_n(a.values().begin() + n * sa[1] * plane, sa[1] * plane, out.begin() + n * os[1] * plane);
    std::copy_n(b.values().begin() + n * sb[1] * plane, sb[1] * plane,
                out.begin() + (n * os[1] + sa[1]) * plane);
  }
  return Tensor::make_result(os, std::move(out), {a, b}, [sa, sb, os, plane](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t n = 0; n < sa[0]; ++n) {
      if (pa.requires_grad)
        for (std::size_t k = 0; k < sa[1] * plane; ++k) pa.grad[n * sa[1] * plane + k] += self.grad[n * os[1] * plane + k];
      if (pb.requires_grad)
        for (std::size_t k = 0; k < sb[1] * plane; ++k)
          pb.grad[n * sb[1] * plane + k] += self.grad[(n * os[1] + sa[1]) * plane + k];
    }
  });
}

/// Rows `indices` of the batch axis, in order (repeats allowed).
inline Tensor take_batch(const Tensor& a, std::span<const std::size_t> indices) {
  const Shape& s = a.shape();
  const std::size_t row = s.numel() / s[0];
  for (auto i : indices)
    if (i >= s[0]) throw ShapeMismatch("take_batch: index out of range");
  Shape os{indices.size(), s[1], s[2], s[3]};
  std::vector<double> out(os.numel());
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(a.values().begin() + indices[k] * row, row, out.begin() + k * row);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::make_result(os, std::move(out), {a}, [idx = std::move(idx), row](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < row; ++j) p.grad[idx[k] * row + j] += self.grad[k * row + j];
  });
}

inline Tensor slice_batch(const Tensor& a, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return take_batch(a, idx);
}

inline Tensor concat_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_batch: no inputs");
  Shape s = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps[1] != s[1] || ps[2] != s[2] || ps[3] != s[3])
      throw ShapeMismatch("concat_batch: " + ps.str() + " vs " + s.str());
    total += ps[0];
  }
  Shape os{total, s[1], s[2], s[3]};
  std::vector<double> out;
  out.reserve(os.numel());
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor::make_result(os, std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->values.size(); ++i) p->grad[i] += self.grad[offset + i];
      offset += p->values.size();
    }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

struct ConvGeometry {
  std::size_t cin, win, hin, k, stride, pad, wout, hout;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return wout * hout; }
};

using RowMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
inline Eigen::Index ei(std::size_t n) { return static_cast<Eigen::Index>(n); }

// Writes the patches of one image into columns [0, cols) of a row-major
// matrix with leading dimension `ld`. Padding entries are left untouched.
inline void im2col(const double* x, const ConvGeometry& g, double* col, std::size_t ld) {
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = col + ((ci * g.k + ky) * g.k + kx) * ld;
        for (std::size_t ow = 0; ow < g.wout; ++ow) {
          const long iw = static_cast<long>(ow * g.stride + ky) - static_cast<long>(g.pad);
          if (iw < 0 || iw >= static_cast<long>(g.win)) continue;
          const double* src = x + (ci * g.win + static_cast<std::size_t>(iw)) * g.hin;
          for (std::size_t oh = 0; oh < g.hout; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + kx) - static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.hin)) continue;
            dst[ow * g.hout + oh] = src[ih];
          }
        }
      }
}

inline void col2im_add(const double* col, std::size_t ld, const ConvGeometry& g, double* gx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = col + ((ci * g.k + ky) * g.k + kx) * ld;
        for (std::size_t ow = 0; ow < g.wout; ++ow) {
          const long iw = static_cast<long>(ow * g.stride + ky) - static_cast<long>(g.pad);
          if (iw < 0 || iw >= static_cast<long>(g.win)) continue;
          double* dst = gx + (ci * g.win + static_cast<std::size_t>(iw)) * g.hin;
          for (std::size_t oh = 0; oh < g.hout; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + kx) - static_cast<long>(g.pad);
            if (ih < 0 || ih >= static_cast<long>(g.hin)) continue;
            dst[ih] += src[ow * g.hout + oh];
          }
        }
      }
}

// Whole-batch patch matrix: rows x (B * cols), image b in column block b.
inline std::vector<double> batch_im2col(const double* x, std::size_t batch, const ConvGeometry& g) {
  const std::size_t ld = batch * g.cols();
  std::vector<double> col(g.rows() * ld, 0.0);
  const std::size_t in_size = g.cin * g.win * g.hin;
  for (std::size_t b = 0; b < batch; ++b) im2col(x + b * in_size, g, col.data() + b * g.cols(), ld);
  return col;
}

}  // namespace detail

/// Cross-correlation of input (B,Cin,W,H) with kernel (Cout,Cin,k,k).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (ks[2] != ks[3] || (ks[2] != 1 && ks[2] != 3)) {
    throw InvalidConfig("conv2d: kernel must be 1x1 or 3x3, got " + ks.str());
  }
  if (stride != 1 && stride != 2) throw InvalidConfig("conv2d: stride must be 1 or 2");
  if (ks[1] != xs[1]) {
    throw ShapeMismatch("conv2d: input channels " + std::to_string(xs[1]) + " vs kernel " + ks.str());
  }
  using detail::ei;
  const std::size_t k = ks[2];
  const long wspan = static_cast<long>(xs[2] + 2 * padding) - static_cast<long>(k);
  const long hspan = static_cast<long>(xs[3] + 2 * padding) - static_cast<long>(k);
  if (wspan < 0 || hspan < 0) throw InvalidConfig("conv2d: input smaller than kernel");
  detail::ConvGeometry g{xs[1], xs[2], xs[3], k, stride, padding,
                         static_cast<std::size_t>(wspan) / stride + 1, static_cast<std::size_t>(hspan) / stride + 1};
  const std::size_t cout = ks[0], batch = xs[0];
  const std::size_t rows = g.rows(), cols = g.cols(), ld = batch * cols;
  Shape os{batch, cout, g.wout, g.hout};
  const auto col = detail::batch_im2col(input.values().data(), batch, g);
  std::vector<double> wide(cout * ld);  // (cout, B * cols)
  detail::RowMat(wide.data(), ei(cout), ei(ld)).noalias() =
      detail::ConstRowMat(kernel.values().data(), ei(cout), ei(rows)) * detail::ConstRowMat(col.data(), ei(rows), ei(ld));
  std::vector<double> out(os.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      std::copy_n(wide.data() + co * ld + b * cols, cols, out.data() + (b * cout + co) * cols);
  return Tensor::make_result(os, std::move(out), {input, kernel}, [g, cout, xs](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    using detail::ei;
    const std::size_t batch = xs[0];
    const std::size_t rows = g.rows(), cols = g.cols(), ld = batch * cols;
    std::vector<double> gwide(cout * ld);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        std::copy_n(self.grad.data() + (b * cout + co) * cols, cols, gwide.data() + co * ld + b * cols);
    detail::ConstRowMat gout(gwide.data(), ei(cout), ei(ld));
    if (pw.requires_grad) {
      const auto col = detail::batch_im2col(px.values.data(), batch, g);
      detail::RowMat(pw.grad.data(), ei(cout), ei(rows)).noalias() +=
          gout * detail::ConstRowMat(col.data(), ei(rows), ei(ld)).transpose();
    }
    if (px.requires_grad) {
      std::vector<double> gcol(rows * ld);
      detail::RowMat(gcol.data(), ei(rows), ei(ld)).noalias() =
          detail::ConstRowMat(pw.values.data(), ei(cout), ei(rows)).transpose() * gout;
      const std::size_t in_size = xs[1] * xs[2] * xs[3];
      for (std::size_t b = 0; b < batch; ++b)
        detail::col2im_add(gcol.data() + b * cols, ld, g, px.grad.data() + b * in_size);
    }
  });
}

// ---------------------------------------------------------------- resampling

inline Tensor maxpool2x2(const Tensor& a) {
  const Shape& s = a.shape();
  if (s[2] % 2 != 0 || s[3] % 2 != 0) throw InvalidConfig("maxpool2x2: spatial dims must be even, got " + s.str());
  Shape os{s[0], s[1], s[2] / 2, s[3] / 2};
  std::vector<double> out(os.numel());
  std::vector<std::size_t> arg(os.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < s[0] * s[1]; ++n)
    for (std::size_t w = 0; w < os[2]; ++w)
      for (std::size_t h = 0; h < os[3]; ++h, ++o) {
        std::size_t best = (n * s[2] + 2 * w) * s[3] + 2 * h;
        for (std::size_t dw = 0; dw < 2; ++dw)
          for (std::size_t dh = 0; dh < 2; ++dh) {
            const std::size_t i = (n * s[2] + 2 * w + dw) * s[3] + 2 * h + dh;
            if (a[i] > a[best]) best = i;
          }
        out[o] = a[best];
        arg[o] = best;
      }
  return Tensor::make_result(os, std::move(out), {a}, [arg = std::move(arg)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < arg.size(); ++o) p.grad[arg[o]] += self.grad[o];
  });
}

namespace detail {
struct LerpTap {
  std::size_t i0, i1;
  double frac;
};
// Half-pixel (align_corners = false) sampling positions for a 2x enlargement.
inline std::vector<LerpTap> upsample_taps(std::size_t n) {
  std::vector<LerpTap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

inline Tensor upsample_bilinear2x(const Tensor& a) {
  const Shape& s = a.shape();
  Shape os{s[0], s[1], 2 * s[2], 2 * s[3]};
  auto tw = detail::upsample_taps(s[2]);
  auto th = detail::upsample_taps(s[3]);
  std::vector<double> out(os.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < s[0] * s[1]; ++n) {
    const double* src = a.values().data() + n * s.spatial();
    for (std::size_t w = 0; w < os[2]; ++w)
      for (std::size_t h = 0; h < os[3]; ++h, ++o) {
        const auto& x = tw[w];
        const auto& y = th[h];
        const double top = src[x.i0 * s[3] + y.i0] * (1 - y.frac) + src[x.i0 * s[3] + y.i1] * y.frac;
        const double bot = src[x.i1 * s[3] + y.i0] * (1 - y.frac) + src[x.i1 * s[3] + y.i1] * y.frac;
        out[o] = top * (1 - x.frac) + bot * x.frac;
      }
  }
  return Tensor::make_result(os, std::move(out), {a}, [s, os, tw, th](detail::Node& self) {
    auto& p = *self.parents[0];
    std::size_t o = 0;
    for (std::size_t n = 0; n < s[0] * s[1]; ++n) {
      double* dst = p.grad.data() + n * s.spatial();
      for (std::size_t w = 0; w < os[2]; ++w)
        for (std::size_t h = 0; h < os[3]; ++h, ++o) {
          const auto& x = tw[w];
          const auto& y = th[h];
          const double g = self.grad[o];
          dst[x.i0 * s[3] + y.i0] += g * (1 - x.frac) * (1 - y.frac);
          dst[x.i0 * s[3] + y.i1] += g * (1 - x.frac) * y.frac;
          dst[x.i1 * s[3] + y.i0] += g * x.frac * (1 - y.frac);
          dst[x.i1 * s[3] + y.i1] += g * x.frac * y.frac;
        }
    }
  });
}

enum class ResampleMode { maxpool2x2, bilinear_up2x };

inline Tensor resample(const Tensor& a, ResampleMode mode) {
  return mode == ResampleMode::maxpool2x2 ? maxpool2x2(a) : upsample_bilinear2x(a);
}

// ---------------------------------------------------------------- softmax family

namespace detail {
struct AxisLayout {
  std::size_t outer, n, inner;
};
inline AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  if (axis > 3) throw InvalidConfig("axis out of range");
  AxisLayout l{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < 4; ++i) l.inner *= s[i];
  return l;
}
}  // namespace detail

inline Tensor softmax(const Tensor& a, std::size_t axis, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidConfig("softmax: temperature must be positive");
  const auto l = detail::axis_layout(a.shape(), axis);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      auto idx = [&](std::size_t k) { return (o * l.n + k) * l.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.n; ++k) mx = std::max(mx, a[idx(k)] / temperature);
      double z = 0.0;
      for (std::size_t k = 0; k < l.n; ++k) z += out[idx(k)] = std::exp(a[idx(k)] / temperature - mx);
      for (std::size_t k = 0; k < l.n; ++k) out[idx(k)] /= z;
    }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [l, temperature](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        auto idx = [&](std::size_t k) { return (o * l.n + k) * l.inner + i; };
        double dot = 0.0;
        for (std::size_t k = 0; k < l.n; ++k) dot += self.grad[idx(k)] * self.values[idx(k)];
        for (std::size_t k = 0; k < l.n; ++k)
          p.grad[idx(k)] += self.values[idx(k)] * (self.grad[idx(k)] - dot) / temperature;
      }
  });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidConfig("log_softmax: temperature must be positive");
  const auto l = detail::axis_layout(a.shape(), axis);
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      auto idx = [&](std::size_t k) { return (o * l.n + k) * l.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.n; ++k) mx = std::max(mx, a[idx(k)] / temperature);
      double z = 0.0;
      for (std::size_t k = 0; k < l.n; ++k) z += std::exp(a[idx(k)] / temperature - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < l.n; ++k) out[idx(k)] = a[idx(k)] / temperature - lse;
    }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [l, temperature](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        auto idx = [&](std::size_t k) { return (o * l.n + k) * l.inner + i; };
        double gsum = 0.0;
        for (std::size_t k = 0; k < l.n; ++k) gsum += self.grad[idx(k)];
        for (std::size_t k = 0; k < l.n; ++k)
          p.grad[idx(k)] += (self.grad[idx(k)] - std::exp(self.values[idx(k)]) * gsum) / temperature;
      }
  });
}

/// Picks a[b, labels[b]] from a (B,K,1,1) tensor, giving (B,1,1,1).
inline Tensor select_labels(const Tensor& a, std::span<const int> labels) {
  const Shape& s = a.shape();
  if (s[2] != 1 || s[3] != 1) throw ShapeMismatch("select_labels expects (B,K,1,1), got " + s.str());
  if (labels.size() != s[0]) throw ShapeMismatch("select_labels: label count does not match batch");
  std::vector<std::size_t> pick(s[0]);
  std::vector<double> out(s[0]);
  for (std::size_t b = 0; b < s[0]; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= s[1]) {
      throw LabelOutOfRange("label " + std::to_string(labels[b]) + " outside [0," + std::to_string(s[1]) + ")");
    }
    pick[b] = b * s[1] + static_cast<std::size_t>(labels[b]);
    out[b] = a[pick[b]];
  }
  return Tensor::make_result(Shape{s[0]}, std::move(out), {a}, [pick = std::move(pick)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t b = 0; b < pick.size(); ++b) p.grad[pick[b]] += self.grad[b];
  });
}

// ---------------------------------------------------------------- row geometry

namespace detail {
inline std::pair<std::size_t, std::size_t> rows_of(const Tensor& a) {
  const Shape& s = a.shape();
  return {s[0], s[1] * s[2] * s[3]};
}
}  // namespace detail

/// a (M,D..) times b (N,D..) transposed, giving (M,N,1,1).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  auto [m, d] = detail::rows_of(a);
  auto [n, d2] = detail::rows_of(b);
  if (d != d2) throw ShapeMismatch("matmul_nt: row lengths " + std::to_string(d) + " vs " + std::to_string(d2));
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += a[i * d + k] * b[j * d + k];
      out[i * n + j] = acc;
    }
  return Tensor::make_result(Shape{m, n}, std::move(out), {a, b}, [m, n, d](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        if (pa.requires_grad)
          for (std::size_t k = 0; k < d; ++k) pa.grad[i * d + k] += g * pb.values[j * d + k];
        if (pb.requires_grad)
          for (std::size_t k = 0; k < d; ++k) pb.grad[j * d + k] += g * pa.values[i * d + k];
      }
  });
}

/// Each batch row scaled to unit Euclidean norm. Rows must be nonzero.
inline Tensor l2_normalize_rows(const Tensor& a) {
  auto [m, d] = detail::rows_of(a);
  std::vector<double> norms(m), out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * a[i * d + k];
    if (!(s > 0.0)) throw DomainError("l2_normalize_rows: zero row");
    norms[i] = std::sqrt(s);
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = a[i * d + k] / norms[i];
  }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [m, d, norms = std::move(norms)](detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += self.grad[i * d + k] * self.values[i * d + k];
      for (std::size_t k = 0; k < d; ++k)
        p.grad[i * d + k] += (self.grad[i * d + k] - self.values[i * d + k] * dot) / norms[i];
    }
  });
}

/// Euclidean distances between rows of a (M,..) and rows of b (N,..), giving
/// (M,N,1,1). Zero distances get zero gradient.
inline Tensor pairwise_l2(const Tensor& a, const Tensor& b) {
  auto [m, d] = detail::rows_of(a);
  auto [n, d2] = detail::rows_of(b);
  if (d != d2) throw ShapeMismatch("pairwise_l2: row lengths differ");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[i * d + k] - b[j * d + k];
        s += diff * diff;
      }
      out[i * n + j] = std::sqrt(s);
    }
  return Tensor::make_result(Shape{m, n}, std::move(out), {a, b}, [m, n, d](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double dist = self.values[i * n + j];
        if (dist == 0.0) continue;
        const double g = self.grad[i * n + j] / dist;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = pa.values[i * d + k] - pb.values[j * d + k];
          if (pa.requires_grad) pa.grad[i * d + k] += g * diff;
          if (pb.requires_grad) pb.grad[j * d + k] -= g * diff;
        }
      }
  });
}

}  // namespace mufan

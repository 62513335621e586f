#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mufan/tensor.hpp"

namespace mufan {

struct GradCheckOptions {
  /// Denominator floor for the relative error, so that near-zero gradients
  /// are compared on an absolute scale of floor * tol.
  double scale_floor = 1e-5;
  /// Coordinates checked per tensor; 0 means all. Strided deterministically.
  std::size_t max_coords_per_tensor = 0;
  /// Retry a failing coordinate with step / 10 before reporting it. A ReLU
  /// or max-pool kink inside the stencil makes the first difference wrong;
  /// a wrong backward rule stays wrong at any step.
  bool refine_on_failure = true;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the reverse-mode gradient of the scalar `f` with respect to each
/// tensor in `params` against central differences. `f` must rebuild its
/// graph from the current values of `params` on every call.
inline GradCheckReport finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                               double step = 1e-5, double tol = 1e-4,
                                               GradCheckOptions options = {}) {
  if (!(step >= 1e-6 && step <= 1e-4)) throw InvalidConfig("finite_difference_check: step must lie in [1e-6, 1e-4]");
  auto eval = [&] {
    NoGradGuard guard;
    return f().item();
  };
  const double f0 = eval();
  if (eval() != f0) throw NondeterministicFunction("two forward passes disagree");

  for (auto& p : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport report;
  auto central = [&](Tensor& p, std::size_t i, double h) {
    auto v = p.mutable_values();
    const double orig = v[i];
    v[i] = orig + h;
    const double up = eval();
    v[i] = orig - h;
    const double down = eval();
    v[i] = orig;
    return (up - down) / (2.0 * h);
  };
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    const std::size_t n = p.numel();
    std::size_t stride = 1;
    if (options.max_coords_per_tensor != 0 && n > options.max_coords_per_tensor)
      stride = (n + options.max_coords_per_tensor - 1) / options.max_coords_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double a = analytic[t][i];
      double num = central(p, i, step);
      double err = relative_error(a, num, options.scale_floor);
      if (err > tol && options.refine_on_failure) {
        const double fine = central(p, i, step / 10.0);
        const double fine_err = relative_error(a, fine, options.scale_floor);
        if (fine_err < err) {
          err = fine_err;
          num = fine;
        }
      }
      ++report.coords_checked;
      if (report.coords_checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = num;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace mufan

#pragma once

// Accuracy matrix and the ACC / FM / LA summaries.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mufan/errors.hpp"

namespace mufan {

/// a(i, j): accuracy on task j's test set after training task i (0-based
/// here). Only j <= i is ever filled.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks) : t_(tasks), a_(tasks * tasks, 0.0), filled_(tasks, false) {}

  std::size_t tasks() const { return t_; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * t_ + j]; }

  /// Row i holds i + 1 values, each in [0, 1].
  void set_row(std::size_t i, const std::vector<double>& row) {
    if (i >= t_ || row.size() != i + 1) throw InvalidConfig("accuracy row " + std::to_string(i) + " has wrong length");
    for (std::size_t j = 0; j <= i; ++j) {
      if (!(row[j] >= 0.0 && row[j] <= 1.0)) throw DomainError("accuracy outside [0, 1]");
      a_[i * t_ + j] = row[j];
    }
    filled_[i] = true;
  }
  bool row_filled(std::size_t i) const { return filled_[i]; }
  bool complete() const { return std::all_of(filled_.begin(), filled_.end(), [](bool b) { return b; }); }
  std::size_t rows_filled() const { return static_cast<std::size_t>(std::count(filled_.begin(), filled_.end(), true)); }

  bool operator==(const AccuracyMatrix&) const = default;

 private:
  std::size_t t_ = 0;
  std::vector<double> a_;
  std::vector<bool> filled_;
};

struct Metrics {
  double acc = 0.0;
  double fm = 0.0;
  double la = 0.0;
};

/// ACC = mean of the last row; FM = mean over j < T of
/// (max_{l < T} a(l, j) - a(T, j)); LA = mean of the diagonal. FM is 0 for
/// a single task.
inline Metrics compute_metrics(const AccuracyMatrix& m) {
  const std::size_t t = m.tasks();
  if (t == 0 || !m.complete()) throw IncompleteMatrix("accuracy matrix has " + std::to_string(m.rows_filled()) +
                                                      " of " + std::to_string(t) + " rows");
  Metrics r;
  for (std::size_t j = 0; j < t; ++j) {
    r.acc += m(t - 1, j);
    r.la += m(j, j);
  }
  r.acc /= static_cast<double>(t);
  r.la /= static_cast<double>(t);
  if (t > 1) {
    for (std::size_t j = 0; j + 1 < t; ++j) {
      double best = m(j, j);
      for (std::size_t l = j + 1; l + 1 < t; ++l) best = std::max(best, m(l, j));
      r.fm += best - m(t - 1, j);
    }
    r.fm /= static_cast<double>(t - 1);
  }
  return r;
}

/// Fixed-point with `digits` decimals, '.' separator regardless of locale.
inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  std::string s(buf, res.ptr);
  if (s.starts_with("-") && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);  // no "-0.000000"
  return s;
}

/// One line per training stage; entries j > i are left empty.
inline void write_matrix_csv(std::ostream& os, const AccuracyMatrix& m) {
  for (std::size_t i = 0; i < m.tasks(); ++i) {
    for (std::size_t j = 0; j < m.tasks(); ++j) {
      if (j) os << ',';
      if (j <= i && m.row_filled(i)) os << format_fixed(m(i, j));
    }
    os << '\n';
  }
}

inline void write_metrics_record(std::ostream& os, const Metrics& r) {
  os << "acc = " << format_fixed(r.acc) << '\n'
     << "fm = " << format_fixed(r.fm) << '\n'
     << "la = " << format_fixed(r.la) << '\n';
}

struct MeanStd {
  double mean = 0.0;
  std::optional<double> std;  // sample std, only with two or more values
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace mufan

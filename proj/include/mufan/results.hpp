#pragma once

// Multi-seed execution and result files:
//   matrix_<seed>.csv   accuracy matrix, 6 decimals
//   metrics.json        per-seed ACC/FM/LA and mean/std over seeds
//   manifest.json       config echo, seeds, version
//   timing.json         wall time (kept apart so the others stay byte-stable)

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mufan/config.hpp"
#include "mufan/trainer.hpp"

namespace mufan {

inline constexpr const char* kVersion = "0.1.0";

/// Worker count: MUFAN_THREADS if set (>= 1), else hardware concurrency,
/// never more than the number of jobs.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MUFAN_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw InvalidValue("MUFAN_THREADS", "not an integer");
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs every seed; the stream and frozen encoder are shared read-only.
inline std::vector<RunResult> run_seeds(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                        const TaskStream* stream_in = nullptr) {
  validate_config(cfg);
  const TaskStream stream = stream_in ? *stream_in : generate_stream(cfg.stream);
  const auto features = make_feature_source(cfg, stream);
  std::vector<RunResult> out(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < seeds.size();) {
      try {
        out[i] = run_experiment(cfg, seeds[i], &stream, features);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = worker_count(seeds.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

struct Summary {
  MeanStd acc, fm, la;
};

inline Summary summarize(const std::vector<RunResult>& runs) {
  std::vector<double> a, f, l;
  for (const auto& r : runs) {
    a.push_back(r.metrics.acc);
    f.push_back(r.metrics.fm);
    l.push_back(r.metrics.la);
  }
  return {mean_std(a), mean_std(f), mean_std(l)};
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

// Values go through format_fixed so the files do not depend on
// shortest-round-trip printing.
inline nlohmann::ordered_json stat_json(const MeanStd& m) {
  nlohmann::ordered_json j;
  j["mean"] = format_fixed(m.mean);
  if (m.std) j["std"] = format_fixed(*m.std);
  return j;
}

}  // namespace detail

/// True when `dir` already holds results (any of our files).
inline bool has_results(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir)) return false;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name == "manifest.json" || name == "metrics.json" || name == "ablation.csv" || name.starts_with("matrix_"))
      return true;
  }
  return false;
}

inline void write_bundle(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                         const std::vector<std::uint64_t>& seeds, const std::vector<RunResult>& runs,
                         double wall_seconds) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    std::ostringstream csv;
    write_matrix_csv(csv, runs[i].matrix);
    detail::write_file(dir / ("matrix_" + std::to_string(seeds[i]) + ".csv"), csv.str());
    per_seed.push_back({{"seed", seeds[i]},
                        {"acc", format_fixed(runs[i].metrics.acc)},
                        {"fm", format_fixed(runs[i].metrics.fm)},
                        {"la", format_fixed(runs[i].metrics.la)}});
  }
  const Summary s = summarize(runs);
  nlohmann::ordered_json metrics;
  metrics["acc"] = detail::stat_json(s.acc);
  metrics["fm"] = detail::stat_json(s.fm);
  metrics["la"] = detail::stat_json(s.la);
  metrics["runs"] = per_seed;
  detail::write_file(dir / "metrics.json", metrics.dump(2) + "\n");

  nlohmann::ordered_json manifest;
  manifest["version"] = kVersion;
  manifest["seeds"] = seeds;
  manifest["config"] = serialize_config(cfg);
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");

  nlohmann::ordered_json timing;
  timing["wall_seconds"] = wall_seconds;
  detail::write_file(dir / "timing.json", timing.dump(2) + "\n");
}

inline std::string mean_std_cell(const MeanStd& m) {
  return m.std ? format_fixed(m.mean) + " ± " + format_fixed(*m.std) : format_fixed(m.mean);
}

struct AblationRow {
  std::string value;
  Summary summary;
};

/// rows = axis values, columns = ACC / FM / LA as mean ± std.
inline std::string ablation_csv(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << axis << ",acc_mean,acc_std,fm_mean,fm_std,la_mean,la_std\n";
  auto cell = [&os](const MeanStd& m) {
    os << ',' << format_fixed(m.mean) << ',';
    if (m.std) os << format_fixed(*m.std);
  };
  for (const auto& r : rows) {
    os << r.value;
    cell(r.summary.acc);
    cell(r.summary.fm);
    cell(r.summary.la);
    os << '\n';
  }
  return os.str();
}

inline std::string ablation_table(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| " << axis << " | ACC | FM | LA |\n|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.value << " | " << mean_std_cell(r.summary.acc) << " | " << mean_std_cell(r.summary.fm) << " | "
       << mean_std_cell(r.summary.la) << " |\n";
  return os.str();
}

}  // namespace mufan

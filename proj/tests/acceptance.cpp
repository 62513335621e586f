// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mufan/invariants.hpp"
#include "mufan/results.hpp"

namespace fs = std::filesystem;
using namespace mufan;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << what << "\n" << std::flush;
}

void report_check(int id, const checks::CheckResult& r) {
  report(id, r.passed, r.name + " " + r.detail);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

ExperimentConfig rotated_base() {
  ExperimentConfig c;
  c.stream.kind = StreamKind::rotated_patterns;
  c.stream.tasks = 5;
  c.stream.classes_per_task = 2;
  c.stream.samples = 500;
  c.stream.width = c.stream.height = 32;
  c.replay.policy = ReplayPolicy::ring;
  c.replay.k = 50;
  c.train.seeds = {0, 1, 2, 3, 4};
  // classes here differ only by orientation across tasks: flips and 4 px
  // shifts are not label-preserving on this stream
  c.train.augment_scope = AugmentScope::none;
  return c;
}

ExperimentConfig er_only() {
  auto c = rotated_base();
  c.loss.weights.lambda_dctn = 0.0;
  c.loss.weights.lambda_dcsd = 0.0;
  c.loss.distill_variant = DistillVariant::none;
  return c;
}

std::string cell(const MeanStd& m) { return mean_std_cell(m); }

void directional() {
  const auto t0 = std::chrono::steady_clock::now();
  auto fine = er_only();
  fine.replay.policy = ReplayPolicy::none;
  auto er = er_only();
  auto csd = er_only();
  csd.loss.weights.lambda_dcsd = ExperimentConfig{}.loss.weights.lambda_dcsd;
  csd.loss.distill_variant = DistillVariant::csd;
  auto standard = er_only();
  standard.encoder.aggregate_mode = AggregateMode::standard;

  const auto stream = generate_stream(er.stream);
  auto run = [&](const ExperimentConfig& c) { return summarize(run_seeds(c, c.train.seeds, &stream)); };
  const auto s_fine = run(fine), s_er = run(er), s_csd = run(csd), s_std = run(standard);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "  fine-tune  ACC " << cell(s_fine.acc) << "  FM " << cell(s_fine.fm) << "  LA " << cell(s_fine.la) << "\n"
            << "  ER         ACC " << cell(s_er.acc) << "  FM " << cell(s_er.fm) << "  LA " << cell(s_er.la) << "\n"
            << "  ER+D-CSD   ACC " << cell(s_csd.acc) << "  FM " << cell(s_csd.fm) << "  LA " << cell(s_csd.la) << "\n"
            << "  ER std     ACC " << cell(s_std.acc) << "  FM " << cell(s_std.fm) << "  LA " << cell(s_std.la) << "\n";
  const double gap = 100.0 * (s_er.acc.mean - s_fine.acc.mean);
  report(7, gap >= 10.0, "(a) ER - fine-tune ACC = " + format_fixed(gap, 2) + " points");
  report(7, s_csd.fm.mean < s_er.fm.mean,
         "(b) FM with structure loss " + format_fixed(s_csd.fm.mean) + " vs ER " + format_fixed(s_er.fm.mean));
  report(7, s_er.la.mean >= s_std.la.mean,
         "(c) LA top_down " + format_fixed(s_er.la.mean) + " vs standard " + format_fixed(s_std.la.mean));
  report(7, secs < 600.0, "(runtime) " + format_fixed(secs, 1) + " s for 20 runs");
}

void determinism() {
  ExperimentConfig c;
  c.stream.samples = 100;
  c.stream.test_samples = 50;
  c.stream.tasks = 3;
  c.train.seeds = {0, 1};
  const fs::path root = fs::temp_directory_path() / "mufan_acceptance_det";
  fs::remove_all(root);
  for (const char* sub : {"a", "b"}) write_bundle(root / sub, c, c.train.seeds, run_seeds(c, c.train.seeds), 0.0);
  bool same = true;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    const auto name = e.path().filename();
    if (name == "timing.json") continue;  // wall clock, not a result
    ++files;
    same = same && slurp(e.path()) == slurp(root / "b" / name);
  }
  fs::remove_all(root);
  report(8, same && files == 4, std::to_string(files) + " result files compared byte for byte");
}

}  // namespace

int main() {
  {
    auto r = checks::check_gradients();
    report(1, r.passed && r.seconds < 60.0, r.name + " " + r.detail + ", " + format_fixed(r.seconds, 1) + " s");
  }
  report_check(2, checks::check_norm_moments());
  report_check(3, checks::check_distillation());
  report_check(4, checks::check_potentials());
  report_check(5, checks::check_metrics());
  report_check(6, checks::check_buffers());
  directional();
  determinism();
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " check(s) failed") << "\n";
  return failures == 0 ? 0 : 1;
}

// mufan_cli: run / ablate / check.
//
//   mufan_cli run    --config exp.ini [--seeds 0,1,2] [--out DIR] [--force]
//   mufan_cli ablate --config exp.ini --axis model.norm_kind --values bn,cn,spn
//   mufan_cli check  [--inject-fault]
//
// Exit status: 0 ok, 1 a check or run failed, 2 bad usage or config.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mufan/config.hpp"
#include "mufan/invariants.hpp"
#include "mufan/results.hpp"

namespace fs = std::filesystem;
using namespace mufan;

namespace {

struct CommonOpts {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  bool force = false;
};

ExperimentConfig load(const CommonOpts& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : parse_config(o.config);
  if (!o.seeds.empty()) cfg.train.seeds = o.seeds;
  if (!o.out.empty()) cfg.output.directory = o.out;
  validate_config(cfg);
  return cfg;
}

void refuse_overwrite(const fs::path& dir, bool force) {
  if (!force && has_results(dir))
    throw std::runtime_error(dir.string() + " already holds results; pass --force to overwrite");
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_run(const CommonOpts& o) {
  const ExperimentConfig cfg = load(o);
  const fs::path dir = cfg.output.directory;
  refuse_overwrite(dir, o.force);
  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = run_seeds(cfg, cfg.train.seeds);
  write_bundle(dir, cfg, cfg.train.seeds, runs, since(t0));
  const auto s = summarize(runs);
  std::cout << "seeds " << runs.size() << "  ACC " << mean_std_cell(s.acc) << "  FM " << mean_std_cell(s.fm)
            << "  LA " << mean_std_cell(s.la) << "  -> " << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& axis, const std::vector<std::string>& values) {
  const ExperimentConfig base = load(o);
  // resolve every value first so a typo fails before any training
  std::vector<ExperimentConfig> cfgs;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    set_config_value(c, axis, v);
    validate_config(c);
    cfgs.push_back(c);
  }
  const fs::path dir = base.output.directory;
  refuse_overwrite(dir, o.force);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto runs = run_seeds(cfgs[i], cfgs[i].train.seeds);
    write_bundle(dir / (axis + "=" + values[i]), cfgs[i], cfgs[i].train.seeds, runs, since(t0));
    rows.push_back({values[i], summarize(runs)});
    std::cerr << axis << " = " << values[i] << " done\n";
  }
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "ablation.csv", std::ios::binary);
    os << ablation_csv(axis, rows);
  }
  std::cout << ablation_table(axis, rows);
  return 0;
}

int cmd_check(bool inject_fault) {
  testing::inject_backward_fault(inject_fault);
  bool ok = true;
  double total = 0.0;
  auto report = [&](const checks::CheckResult& r) {
    ok = ok && r.passed;
    total += r.seconds;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n" << std::flush;
  };
  report(checks::check_gradients());
  report(checks::check_norm_moments());
  report(checks::check_distillation());
  report(checks::check_potentials());
  report(checks::check_metrics());
  report(checks::check_buffers());
  std::cout << (ok ? "all groups passed" : "some groups FAILED") << " (" << checks::detail::fmt(total) << " s)\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"online continual learning engine"};
  app.require_subcommand(1);
  CommonOpts opts;
  std::string axis;
  std::vector<std::string> values;
  bool inject_fault = false;

  auto add_common = [&opts](CLI::App* sub) {
    sub->add_option("--config", opts.config, "experiment config file")->check(CLI::ExistingFile);
    sub->add_option("--seeds", opts.seeds, "comma separated seeds")->delimiter(',');
    sub->add_option("--out", opts.out, "output directory");
    sub->add_flag("--force", opts.force, "overwrite existing results");
  };
  auto* run = app.add_subcommand("run", "train and evaluate over seeds");
  add_common(run);
  auto* ablate = app.add_subcommand("ablate", "sweep one config key");
  add_common(ablate);
  ablate->add_option("--axis", axis, "config key, e.g. model.norm_kind")->required();
  ablate->add_option("--values", values, "comma separated values")->delimiter(',')->required();
  auto* check = app.add_subcommand("check", "run the invariant suite");
  check->add_flag("--inject-fault", inject_fault, "corrupt one backward rule (negative control)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(opts);
    if (*ablate) return cmd_ablate(opts, axis, values);
    if (*check) return cmd_check(inject_fault);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

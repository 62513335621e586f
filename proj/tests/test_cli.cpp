#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mufan_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path log = kRoot / "stdout.txt";
  const std::string cmd = std::string(MUFAN_CLI_PATH) + " " + args + " > " + log.string() + " 2>/dev/null";
  const int rc = std::system(cmd.c_str());
  if (out) *out = slurp(log);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
  const fs::path p = kRoot / name;
  std::ofstream os(p);
  os << "[stream]\nkind = gaussian_blobs\ntasks = 2\nsamples = 20\ntest_samples = 10\n"
     << "[loss]\nN = 5\n[replay]\nreplay_batch = 5\n"
     << extra;
  return p;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
  void TearDown() override { fs::remove_all(kRoot); }
};

double csv_mean_acc(const fs::path& dir, int seeds) {
  // ACC is the mean of the last row
  double total = 0.0;
  for (int s = 0; s < seeds; ++s) {
    std::ifstream is(dir / ("matrix_" + std::to_string(s) + ".csv"));
    std::string line, last;
    while (std::getline(is, line))
      if (!line.empty()) last = line;
    std::stringstream ss(last);
    std::string cell;
    double sum = 0.0;
    int n = 0;
    while (std::getline(ss, cell, ',')) {
      sum += std::stod(cell);
      ++n;
    }
    total += sum / n;
  }
  return total / seeds;
}

}  // namespace

TEST_F(Cli, RunWritesPerSeedAndAggregate) {
  const auto cfg = write_config("a.ini");
  const auto out = kRoot / "out";
  ASSERT_EQ(run_cli("run --config " + cfg.string() + " --seeds 0,1,2,3,4 --out " + out.string()), 0);
  for (int s = 0; s < 5; ++s) EXPECT_TRUE(fs::exists(out / ("matrix_" + std::to_string(s) + ".csv")));
  ASSERT_TRUE(fs::exists(out / "metrics.json"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  auto j = nlohmann::json::parse(slurp(out / "metrics.json"));
  EXPECT_EQ(j["runs"].size(), 5u);
  // six decimals on both sides
  EXPECT_NEAR(std::stod(j["acc"]["mean"].get<std::string>()), csv_mean_acc(out, 5), 2e-6);
}

TEST_F(Cli, RefusesToOverwrite) {
  const auto cfg = write_config("a.ini");
  const auto out = kRoot / "out";
  const std::string args = "run --config " + cfg.string() + " --seeds 0 --out " + out.string();
  ASSERT_EQ(run_cli(args), 0);
  EXPECT_NE(run_cli(args), 0);
  EXPECT_EQ(run_cli(args + " --force"), 0);
}

TEST_F(Cli, RunIsByteDeterministic) {
  const auto cfg = write_config("a.ini");
  const std::string args = "run --config " + cfg.string() + " --seeds 0,1 --out " + (kRoot / "x").string();
  const char* files[] = {"matrix_0.csv", "matrix_1.csv", "metrics.json", "manifest.json"};
  ASSERT_EQ(run_cli(args), 0);
  std::vector<std::string> first;
  for (const char* f : files) first.push_back(slurp(kRoot / "x" / f));
  ASSERT_EQ(run_cli(args + " --force"), 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(slurp(kRoot / "x" / files[i]), first[i]) << files[i];
}

TEST_F(Cli, AblateTableShape) {
  const auto cfg = write_config("a.ini");
  const auto out = kRoot / "abl";
  std::string stdout_text;
  ASSERT_EQ(run_cli("ablate --config " + cfg.string() + " --seeds 0,1 --out " + out.string() +
                        " --axis model.norm_kind --values bn,spn",
                    &stdout_text),
            0);
  const std::string csv = slurp(out / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("model.norm_kind,acc_mean", 0), 0u);
  EXPECT_TRUE(fs::exists(out / "model.norm_kind=bn" / "metrics.json"));
  EXPECT_NE(stdout_text.find("| spn |"), std::string::npos);
}

TEST_F(Cli, UnknownAxisIsUsageError) {
  const auto cfg = write_config("a.ini");
  EXPECT_EQ(run_cli("ablate --config " + cfg.string() + " --out " + (kRoot / "o").string() +
                    " --axis model.nrom_kind --values bn"),
            2);
  EXPECT_FALSE(fs::exists(kRoot / "o" / "ablation.csv"));
}

TEST_F(Cli, BadConfigIsUsageError) {
  const auto cfg = write_config("bad.ini", "[train]\nlr = -1\n");
  EXPECT_EQ(run_cli("run --config " + cfg.string() + " --out " + (kRoot / "o").string()), 2);
}

TEST_F(Cli, CheckPassesAndFaultIsCaught) {
  std::string text;
  EXPECT_EQ(run_cli("check", &text), 0) << text;
  EXPECT_NE(text.find("PASS gradients"), std::string::npos) << text;
  EXPECT_EQ(run_cli("check --inject-fault", &text), 1);
  EXPECT_NE(text.find("FAIL gradients"), std::string::npos) << text;
}

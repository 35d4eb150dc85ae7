#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cli_util.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = DCTNN_CLI;

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / name; }

}  // namespace

TEST(Cli, ExitCodes) {
  const auto root = scratch("dctnn_cli_codes");
  fs::remove_all(root);
  EXPECT_EQ(cliutil::run(kCli, "--help"), 0);
  EXPECT_EQ(cliutil::run(kCli, ""), 2);
  EXPECT_EQ(cliutil::run(kCli, "simulate"), 2);
  EXPECT_EQ(cliutil::run(kCli, "simulate --out " + root.string() + " --n 7"), 2);
  EXPECT_EQ(cliutil::run(kCli, "simulate --out " + root.string() + " --regime nope"), 2);
  EXPECT_EQ(cliutil::run(kCli, "fit --data " + (root / "missing").string() + " --out " +
                                   (root / "f").string()),
            3);
  EXPECT_EQ(cliutil::run(kCli, "inspect " + (root / "missing").string()), 3);
  fs::remove_all(root);
}

TEST(Cli, PipelineIsDeterministicAndVerifiable) {
  const auto a = cliutil::run_pipeline(kCli, scratch("dctnn_cli_a"));
  const auto b = cliutil::run_pipeline(kCli, scratch("dctnn_cli_b"));
  for (const auto& [step, code] : a.exit_codes) {
    EXPECT_EQ(code, 0) << step;
    EXPECT_FALSE(a.artifacts.at(step).empty()) << step;
    EXPECT_EQ(a.artifacts.at(step), b.artifacts.at(step)) << step;
  }
  EXPECT_EQ(a.inspect_verify, 0);
  const auto sel = scratch("dctnn_cli_a") / "sel";
  EXPECT_TRUE(fs::exists(sel / "decision.json"));
  EXPECT_TRUE(fs::exists(sel / "dband_tucker-cp.csv"));
  EXPECT_TRUE(fs::exists(sel / "dband_cp-tucker.csv"));

  // Tampering is detected; a model fit on other data is refused.
  std::ofstream(sel / "decision.json", std::ios::app) << " ";
  EXPECT_EQ(cliutil::run(kCli, "inspect --verify " + sel.string()), 3);
  const auto other = scratch("dctnn_cli_other");
  EXPECT_EQ(cliutil::run(kCli, "simulate --out " + other.string() +
                                   " --regime cp --n 240 --dims 12,12,12 --seed 5"),
            0);
  EXPECT_EQ(cliutil::run(kCli, "uq --data " + other.string() + " --model " +
                                   (scratch("dctnn_cli_a") / "fit_t").string() + " --out " +
                                   (other / "uq").string()),
            3);
  for (const char* d : {"dctnn_cli_a", "dctnn_cli_b", "dctnn_cli_other"}) fs::remove_all(scratch(d));
}

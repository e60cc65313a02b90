#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spnas/config.hpp"
#include "spnas/latency.hpp"

using namespace spnas;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "spnas_cli_test";
const std::string kTiny = std::string(SPNAS_SOURCE_DIR) + "/configs/tiny.json";

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun cli(const std::string& args) {
  fs::create_directories(kDir);
  const std::string cmd = "cd " + kDir.string() + " && " + SPNAS_CLI + " " + args + " >stdout.txt 2>stderr.txt";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(kDir / "stdout.txt");
  r.err = slurp(kDir / "stderr.txt");
  return r;
}

void write(const std::string& name, const std::string& text) {
  fs::create_directories(kDir);
  std::ofstream(kDir / name) << text;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kDir);
    ASSERT_EQ(cli("lutgen --config " + kTiny + " --seed 3 --out lut.json").code, 0);
  }
};

}  // namespace

TEST_F(Cli, AllSkipLatencyIsFixedOverhead) {
  write("skip.json", R"({"layers": [{"skip": true}, {"skip": true}, {"skip": true}]})");
  const CliRun r = cli("latency --arch skip.json --lut lut.json --seed 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const LatencyTable lut = ingest_lut((kDir / "lut.json").string());
  EXPECT_EQ(std::stod(r.out), lut.fixed_overhead_ms);
}

TEST_F(Cli, ZeroStepSearchDerivesMinimalTypes) {
  CliRun r = cli("search --config " + kTiny + " --lut lut.json --lambda 0 --steps 0 --checkpoint s0.ckpt --seed 1");
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli("derive --checkpoint s0.ckpt --out d0.json --seed 1");
  ASSERT_EQ(r.code, 0) << r.err;
  // Layer 1 changes resolution, so it cannot be skipped.
  const Architecture want{MBConvType::skip_op(), MBConvType::min_type(), MBConvType::skip_op()};
  EXPECT_EQ(architecture_from_json(read_json_file((kDir / "d0.json").string())), want);
}

TEST_F(Cli, DerivedLatencyMatchesSearchReport) {
  for (const std::string lambda : {"0", "0.05"}) {
    CliRun r = cli("search --config " + kTiny + " --lut lut.json --lambda " + lambda +
                " --checkpoint s.ckpt --out s.json --seed 2");
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_EQ(cli("derive --checkpoint s.ckpt --out d.json").code, 0);
    r = cli("latency --arch d.json --lut lut.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = read_json_file((kDir / "s.json").string());
    EXPECT_EQ(std::stod(r.out), report.at("runtime_ms").get<double>());
    EXPECT_EQ(architecture_from_json(read_json_file((kDir / "d.json").string())),
              architecture_from_json(report.at("architecture")));
  }
}

TEST_F(Cli, OutputsAreByteReproducible) {
  ASSERT_EQ(cli("search --config " + kTiny + " --lut lut.json --lambda 0.1 --seed 4 --out a.json --log a.csv").code, 0);
  ASSERT_EQ(cli("search --config " + kTiny + " --lut lut.json --lambda 0.1 --seed 4 --out b.json --log b.csv").code, 0);
  EXPECT_EQ(slurp(kDir / "a.json"), slurp(kDir / "b.json"));
  EXPECT_EQ(slurp(kDir / "a.csv"), slurp(kDir / "b.csv"));
  ASSERT_EQ(cli("hypertune --method mf --budget-epochs 30 --seed 5 --workers 2 --out h1.json").code, 0);
  ASSERT_EQ(cli("hypertune --method mf --budget-epochs 30 --seed 5 --workers 2 --out h2.json").code, 0);
  EXPECT_EQ(slurp(kDir / "h1.json"), slurp(kDir / "h2.json"));
  ASSERT_EQ(cli("grid-study --lambdas 0.1,1 --budgets 2,8 --out g1.csv").code, 0);
  ASSERT_EQ(cli("grid-study --lambdas 0.1,1 --budgets 2,8 --out g2.csv").code, 0);
  EXPECT_EQ(slurp(kDir / "g1.csv"), slurp(kDir / "g2.csv"));
}

TEST_F(Cli, ExitCodesAndVerbatimErrors) {
  write("bad.json", R"({"search": {"lamda": 1}})");
  CliRun r = cli("search --config bad.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err, "config: unknown key 'search.lamda'\n");

  r = cli("random-search --config " + kTiny + " --lut lut.json --window-hi 0.001");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("no architecture with runtime in"), std::string::npos) << r.err;

  write("hot.json", R"({"space": )" + to_json(load_config(kTiny).space).dump() +
                        R"(, "data": {"classes": 4, "n": 120, "image_size": 8},
                           "search": {"lr": 1e12, "epochs": 20, "batch": 32}})");
  r = cli("search --config hot.json --lut lut.json");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("search diverged at step"), std::string::npos) << r.err;

  EXPECT_EQ(cli("search --no-such-flag").code, 2);
  EXPECT_EQ(cli("derive --checkpoint missing.ckpt").code, 2);
}

TEST_F(Cli, TrainAndStudiesRun) {
  write("arch.json", R"({"layers": ["MBConv-3x3-3-0", "MBConv-5x5-6-0.25", "skip"]})");
  CliRun r = cli("train --config " + kTiny + " --arch arch.json --epochs 1 --out t.json");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(read_json_file((kDir / "t.json").string()).contains("accuracy"));
  r = cli("variance-study --config " + kTiny + " --lut lut.json --variants single_sigmoid,random --runs 2 --workers 2 "
          "--out v.json");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json_file((kDir / "v.json").string()).at("cells").size(), 2u);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vpnet/cli.hpp"

using namespace vpnet;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

const std::vector<std::string> kSmall = {"--channels", "2", "--bins", "8", "--stages", "2", "--hidden", "2"};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("vpnet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void synth(const std::string& name, std::size_t frames = 2) {
    ASSERT_EQ(run({"synth", "--out", path(name), "--frames", std::to_string(frames), "--seed", "4", "--width", "32",
                   "--height", "16", "--points", "100"})
                  .code,
              kExitOk);
  }

  void train_small(const std::string& data, const std::string& out, std::size_t steps = 5) {
    std::vector<std::string> a = {"train", "--data", path(data), "--out", path(out), "--steps", std::to_string(steps),
                                  "--points-train", "50"};
    a.insert(a.end(), kSmall.begin(), kSmall.end());
    const auto r = run(a);
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, SynthIsDeterministic) {
  synth("a");
  synth("b");
  for (const char* f : {"calib.txt", "0000_left.ppm", "0001_right.ppm", "0001_depth.pfm", "0000_points.pcb"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
}

TEST_F(CliTest, SynthZeroFramesWritesOnlyCalib) {
  synth("z", 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "z")) {
    EXPECT_EQ(e.path().filename(), "calib.txt");
    ++files;
  }
  EXPECT_EQ(files, 1u);
}

TEST_F(CliTest, SynthRejectsExtentsNotDivisibleByFour) {
  const auto r = run({"synth", "--out", path("x"), "--width", "130"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("divisible by 4"), std::string::npos);
}

TEST_F(CliTest, UnknownFlagIsUsageError) {
  EXPECT_EQ(run({"synth", "--out", path("x"), "--bogus", "1"}).code, kExitUsage);
  EXPECT_EQ(run({}).code, kExitUsage);
}

TEST_F(CliTest, EarlyFusionNeedsRawPoints) {
  synth("d");
  const auto r = run({"train", "--data", path("d"), "--out", path("m"), "--fusion", "early", "--pointnet",
                      "fusionconv"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("early fusion requires --pointnet raw"), std::string::npos);
}

TEST_F(CliTest, TrainThenEval) {
  synth("d");
  train_small("d", "m", 6);
  EXPECT_TRUE(fs::exists(dir_ / "m" / "model.vpn"));
  EXPECT_TRUE(fs::exists(dir_ / "m" / "model.json"));

  // total = 0.7 * stage1 + 1.0 * stage2
  const auto loss = csv_rows(slurp(dir_ / "m" / "loss.csv"));
  ASSERT_EQ(loss.size(), 7u);
  EXPECT_EQ(loss[0], (std::vector<std::string>{"step", "stage1", "stage2", "total"}));
  for (std::size_t i = 1; i < loss.size(); ++i) {
    const double s1 = std::stod(loss[i][1]), s2 = std::stod(loss[i][2]), t = std::stod(loss[i][3]);
    EXPECT_NEAR(t, 0.7 * s1 + 1.0 * s2, 1e-9 * std::max(1.0, t));
  }

  const auto r = run({"eval", "--data", path("d"), "--model", path("m/model.vpn"), "--report", path("metrics.csv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out, slurp(dir_ / "metrics.csv"));
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "sample");
  EXPECT_EQ(rows[3][0], "mean");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double rmse = std::stod(rows[i][1]), mae = std::stod(rows[i][2]);
    EXPECT_TRUE(std::isfinite(rmse));
    EXPECT_GE(rmse, mae);
  }
}

TEST_F(CliTest, EvalFlagMismatchIsUsageError) {
  synth("d");
  train_small("d", "m", 1);
  const auto r = run({"eval", "--data", path("d"), "--model", path("m/model.vpn"), "--volume", "cost"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_EQ(run({"eval", "--data", path("d"), "--model", path("m/model.vpn"), "--volume", "fusion"}).code, kExitOk);
}

TEST_F(CliTest, EvalMissingModelIsDataError) {
  synth("d");
  EXPECT_EQ(run({"eval", "--data", path("d"), "--model", path("none.vpn")}).code, kExitData);
}

TEST_F(CliTest, InferIsDeterministicAndPointsOptional) {
  synth("d");
  train_small("d", "m", 2);
  const std::vector<std::string> base = {"infer",  "--left",  path("d/0000_left.ppm"), "--right",
                                         path("d/0000_right.ppm"), "--calib", path("d/calib.txt"),
                                         "--model", path("m/model.vpn")};
  auto with = [&](std::vector<std::string> extra) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  };
  ASSERT_EQ(with({"--points", path("d/0000_points.pcb"), "--out", path("a.pfm")}).code, kExitOk);
  ASSERT_EQ(with({"--points", path("d/0000_points.pcb"), "--out", path("b.pfm")}).code, kExitOk);
  EXPECT_EQ(slurp(dir_ / "a.pfm"), slurp(dir_ / "b.pfm"));
  EXPECT_FALSE(slurp(dir_ / "a.pfm").empty());
  const auto none = with({"--out", path("c.pfm")});
  EXPECT_EQ(none.code, kExitOk);
  EXPECT_NE(none.out.find("(0 points)"), std::string::npos);
}

TEST_F(CliTest, InferCalibMismatchIsDataError) {
  synth("d");
  train_small("d", "m", 1);
  save_calib(path("wide.txt"), default_rig(64, 16));
  const auto r = run({"infer", "--left", path("d/0000_left.ppm"), "--right", path("d/0000_right.ppm"), "--calib",
                      path("wide.txt"), "--model", path("m/model.vpn"), "--out", path("o.pfm")});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("do not match calibration"), std::string::npos);
}

TEST_F(CliTest, QuantizeEmptyCloudGivesZeroCounts) {
  ASSERT_EQ(run({"synth", "--out", path("e"), "--frames", "1", "--width", "32", "--height", "16", "--points", "0"})
                .code,
            kExitOk);
  const auto r = run({"quantize", "--data", path("e"), "--report", path("q.csv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_GT(rows.size(), 1u);
  const auto& header = rows[0];
  const auto count_col = std::find(header.begin(), header.end(), "count") - header.begin();
  ASSERT_LT(static_cast<std::size_t>(count_col), header.size());
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][count_col], "0");
}

TEST_F(CliTest, GradcheckPerturbFails) {
  const auto bad = run({"gradcheck", "--kind", "relu", "--perturb", "relu", "--report", path("g.csv")});
  EXPECT_EQ(bad.code, kExitCheck);
  const auto rows = csv_rows(slurp(dir_ / "g.csv"));
  bool named = false;
  for (const auto& r : rows) named = named || (r[0] == "relu" && r.back() == "FAIL");
  EXPECT_TRUE(named);
  EXPECT_EQ(run({"gradcheck", "--kind", "relu"}).code, kExitOk);
}

TEST_F(CliTest, GradcheckListAndUnknownKind) {
  const auto list = run({"gradcheck", "--list"});
  EXPECT_EQ(list.code, kExitOk);
  EXPECT_NE(list.out.find("fusionconv"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--kind", "warp"}).code, kExitUsage);
}

TEST_F(CliTest, AblateWritesPerSeedAndMeanRows) {
  synth("d");
  std::vector<std::string> a = {"ablate", "--data", path("d"), "--modes", "fusion/raw/intermediate,fusion/raw/early",
                                "--seeds", "0,1", "--steps", "2", "--points-train", "50"};
  a.insert(a.end(), kSmall.begin(), kSmall.end());
  const auto r = run(a);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[5][3], "mean");
  EXPECT_EQ(rows[6][2], "early");
  EXPECT_EQ(run({"ablate", "--data", path("d"), "--modes", "fusion/raw"}).code, kExitUsage);
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "support/pipeline.hpp"
#include "wheatnet/config.hpp"

using namespace wheatnet;
using wheatnet::testing::fresh_dir;
using wheatnet::testing::run_cli;

namespace fs = std::filesystem;

namespace {

int run_binary(const std::string& args) {
  const char* exe = std::getenv("WHEATNET_CLI");
  if (!exe) return -1;
  const int status = std::system((std::string(exe) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Binary, ExitCodes) {
  if (!std::getenv("WHEATNET_CLI")) GTEST_SKIP() << "WHEATNET_CLI not set";
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("train --help"), 0);
  EXPECT_EQ(run_binary("--frobnicate"), 1);
  EXPECT_EQ(run_binary("launch"), 1);
  EXPECT_EQ(run_binary(""), 1);
  EXPECT_EQ(run_binary("eval --pred /nonexistent.json --gt /nonexistent.csv"), 2);
}

TEST(Run, HelpOnEverySubcommand) {
  for (const char* sub : {"gen-synthetic", "gen-gt", "augment", "train", "infer", "eval", "yield"}) {
    const auto r = run_cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
  }
}

TEST(Run, UsageErrors) {
  EXPECT_EQ(run_cli({"gen-synthetic", "--out", "x", "--bogus"}).code, 1);
  EXPECT_EQ(run_cli({"yield"}).code, 1);  // --spacing-in missing
  EXPECT_EQ(run_cli({"eval", "--pred", "a", "--gt", "b", "--count-source", "median"}).code, 1);
  EXPECT_EQ(run_cli({"yield", "--heads-per-foot", "4", "--from-prediction", "p.json", "--spacing-in", "7"}).code, 1);
}

TEST(Run, YieldPrintsBushels) {
  const auto r = run_cli({"yield", "--heads-per-foot", "42", "--spacing-in", "12"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out).at("bu_per_acre").get<double>(), 36.96);
  EXPECT_EQ(run_cli({"yield", "--heads-per-foot", "0", "--spacing-in", "12"}).code, 2);
}

TEST(Run, YieldFromPredictions) {
  const auto dir = fresh_dir("yield_pred");
  const std::string pred = (dir / "p.json").string();
  write_file(pred, R"([{"image_id":"a","density_count":10,"peak_count":12,"avg_count":11,"peaks":[]},
                       {"image_id":"b","density_count":20,"peak_count":20,"avg_count":20,"peaks":[]}])");
  const auto r = run_cli({"yield", "--from-prediction", pred, "--feet-per-image", "0.5", "--spacing-in", "10",
                          "--count-source", "peak"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("heads_per_foot").get<double>(), 32.0);
  EXPECT_DOUBLE_EQ(j.at("bu_per_acre").get<double>(), 32.0 * 22 / 10 * 0.48);
}

TEST(Run, SeedFromEnvironment) {
  const auto a = fresh_dir("env_a"), b = fresh_dir("env_b"), c = fresh_dir("env_c");
  ASSERT_EQ(run_cli({"gen-synthetic", "--out", a.string(), "--n", "3", "--points-only", "--seed", "77"}).code, 0);
  ::setenv("HEADCOUNT_SEED", "77", 1);
  const auto rb = run_cli({"gen-synthetic", "--out", b.string(), "--n", "3", "--points-only"});
  ::unsetenv("HEADCOUNT_SEED");
  ASSERT_EQ(rb.code, 0) << rb.err;
  ASSERT_EQ(run_cli({"gen-synthetic", "--out", c.string(), "--n", "3", "--points-only"}).code, 0);
  EXPECT_EQ(read_file(a / "all.csv"), read_file(b / "all.csv"));
  EXPECT_NE(read_file(a / "all.csv"), read_file(c / "all.csv"));
}

TEST(Run, SplitManifestsPartitionCorpus) {
  const auto dir = fresh_dir("split");
  const auto r = run_cli({"gen-synthetic", "--out", dir.string(), "--n", "10", "--points-only", "--test-fraction",
                          "0.5", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("train").get<int>(), 5);
  EXPECT_EQ(j.at("test").get<int>(), 5);
  EXPECT_TRUE(fs::exists(dir / "test.csv"));
}

TEST(Run, AugmentDryRunCounts) {
  const auto dir = fresh_dir("dry");
  ASSERT_EQ(run_cli({"gen-synthetic", "--out", dir.string(), "--n", "4", "--points-only", "--seed", "1"}).code, 0);
  const auto r = run_cli({"augment", "--manifest", (dir / "all.json").string(), "--dry-run"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out).at("patches").get<int>(), 4 * 36);
}

TEST(Config, KeyValueAndJsonAgree) {
  const auto dir = fresh_dir("cfg");
  write_file(dir / "a.cfg", "# small\nwidth_multiplier = 0.25\nlr_initial = 1e-3\nmerge_channels = 8, 8, 16\nseed = 5\n");
  write_file(dir / "a.json", R"({"width_multiplier":0.25,"lr_initial":0.001,"merge_channels":[8,8,16],"seed":5})");
  const RunConfig a = load_run_config((dir / "a.cfg").string());
  const RunConfig b = load_run_config((dir / "a.json").string());
  EXPECT_EQ(a.model.width_multiplier, 0.25);
  EXPECT_EQ(a.train.lr_initial, 1e-3);
  EXPECT_EQ(a.model.seed, 5u);
  EXPECT_EQ(a.train.seed, 5u);
  EXPECT_EQ(a.model.to_json(), b.model.to_json());
  EXPECT_EQ(a.train.to_json(), b.train.to_json());
  write_file(dir / "bad.cfg", "widht_multiplier = 0.5\n");
  EXPECT_THROW(load_run_config((dir / "bad.cfg").string()), DataError);
  write_file(dir / "worse.cfg", "just words\n");
  EXPECT_THROW(load_run_config((dir / "worse.cfg").string()), DataError);
}

TEST(Pipeline, SmokeRunIsReproducible) {
  const auto a = wheatnet::testing::smoke_pipeline("smoke_a");
  for (const auto& s : a.steps) EXPECT_EQ(s.code, 0) << s.err;
  ASSERT_TRUE(a.ok());
  const auto rep = nlohmann::json::parse(a.report);
  EXPECT_EQ(rep.at("n_images").get<int>(), 3);
  EXPECT_GE(rep.at("rmse").get<double>(), rep.at("mae").get<double>());

  const auto b = wheatnet::testing::smoke_pipeline("smoke_b");
  ASSERT_TRUE(b.ok());
  EXPECT_EQ(a.report, b.report);
  EXPECT_EQ(read_file(a.dir / "model.whnw"), read_file(b.dir / "model.whnw"));

  // Train log: one JSON line per step.
  const std::string& log = a.steps[3].out;
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 200);

  const auto maps = run_cli({"infer", "--weights", (a.dir / "model.whck").string(), "--image",
                             (a.dir / "corpus/images").string() + "/" +
                                 fs::directory_iterator(a.dir / "corpus/images")->path().filename().string(),
                             "--emit-maps", "--maps-dir", (a.dir / "maps").string()});
  EXPECT_EQ(maps.code, 0) << maps.err;
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a.dir / "maps")) ++files;
  EXPECT_EQ(files, 3u);
}

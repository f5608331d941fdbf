#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "lowrank/cli.hpp"
#include "test_util.hpp"

using namespace lowrank;
using lowrank::testing::scratch_dir;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "lowrank");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::string small_config(const std::filesystem::path& dir, const std::string& extra = "") {
  const auto p = dir / "exp.toml";
  write(p, "output_dir = \"runs\"\nloss = \"logistic\"\n[network]\npreset = \"mlp-1-6\"\n"
           "[dataset]\nkind = \"synthetic\"\nn = 4\nm = 24\nclasses = 2\n"
           "[sgd]\nlr = 0.05\nweight_decay = 0.01\nbatch_size = 4\nepochs = 2\n" + extra);
  return p.string();
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"train"}).code, kExitUsage);
  EXPECT_EQ(run({"train", "--config", "/nonexistent/x.toml"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({"verify-bound", "--norm", "nuclear"}).code, kExitUsage);
}

TEST(Cli, BadConfigPrintsSchema) {
  const auto dir = scratch_dir("cli_badcfg");
  write(dir / "bad.toml", "[sgd]\nrate = 1\n");
  const auto r = run({"train", "--config", (dir / "bad.toml").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("sgd.rate"), std::string::npos);
  EXPECT_NE(r.err.find("[sgd]"), std::string::npos);
}

TEST(Cli, GenDataWritesCsv) {
  const auto dir = scratch_dir("cli_gen");
  const auto out = (dir / "d.csv").string();
  EXPECT_EQ(run({"gen-data", "--n", "3", "--m", "10", "--classes", "2", "--seed", "4", "--out", out}).code, kExitOk);
  std::ifstream f(out);
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "label,x0,x1,x2");
  EXPECT_EQ(run({"gen-data", "--n", "1", "--m", "10", "--classes", "2", "--out", out}).code, kExitUsage);
  EXPECT_EQ(run({"gen-data", "--out", out + "/below_a_file.csv"}).code, kExitUsage);
}

TEST(Cli, TrainSweepPlot) {
  const auto dir = scratch_dir("cli_train");
  const auto cfg = small_config(dir, "[sweep]\naxis = \"batch_size\"\nvalues = [2, 4]\n");
  const auto out = (dir / "t").string();
  EXPECT_EQ(run({"train", "--config", cfg, "--out", out}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir / "t" / "run" / "metrics.csv"));
  const auto sw = (dir / "s").string();
  EXPECT_EQ(run({"sweep", "--config", cfg, "--out", sw, "--threads", "2"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir / "s" / "r1_batch_size_4" / "manifest.json"));
  const auto svg = (dir / "p.svg").string();
  EXPECT_EQ(run({"plot", "--input", sw + "/metrics.csv", "--out", svg, "--metric", "train_loss"}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(svg));
  EXPECT_EQ(run({"plot", "--input", sw + "/metrics.csv", "--out", svg, "--metric", "nope"}).code, kExitUsage);
  EXPECT_EQ(run({"plot", "--input", "/nonexistent.csv", "--out", svg}).code, kExitUsage);
  EXPECT_EQ(run({"sweep", "--config", cfg, "--threads", "0"}).code, kExitUsage);
}

TEST(Cli, VerifyLemmaPasses) {
  const auto dir = scratch_dir("cli_lemma");
  const auto json = (dir / "lemma.json").string();
  const auto r = run({"verify-lemma", "--net", "mlp-2-6", "--seeds", "5", "--samples", "3", "--json", json});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(std::filesystem::exists(json));
  EXPECT_EQ(run({"verify-lemma", "--net", "cnn-2", "--seeds", "2", "--image", "6", "--samples", "2"}).code,
            kExitOk);
  EXPECT_EQ(run({"verify-lemma", "--net", "lstm"}).code, kExitUsage);
}

TEST(Cli, VerifyBoundAndNoiseDiag) {
  const auto dir = scratch_dir("cli_bound");
  const auto cfg = small_config(dir);
  const auto r = run({"verify-bound", "--config", cfg, "--every", "2", "--out", (dir / "b").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "b" / "bound_report.json"));
  EXPECT_EQ(run({"noise-diag", "--config", cfg, "--out", (dir / "n.json").string()}).code, kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir / "n.json"));

  ASSERT_EQ(run({"train", "--config", cfg, "--out", (dir / "t").string()}).code, kExitOk);
  ASSERT_EQ(run({"gen-data", "--n", "4", "--m", "24", "--classes", "2", "--out", (dir / "d.csv").string()}).code,
            kExitOk);
  EXPECT_EQ(run({"noise-diag", "--checkpoint", (dir / "t" / "run" / "final.ckpt").string(), "--data",
                 (dir / "d.csv").string(), "--loss", "logistic"})
                .code,
            kExitOk);
  EXPECT_EQ(run({"noise-diag"}).code, kExitUsage);
}

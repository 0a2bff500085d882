#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stn/episodic.hpp"
#include "stn/tensor_io.hpp"

using namespace stn;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + STN_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// One small dataset and trained pair shared by the tests below.
class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("stn_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    ASSERT_EQ(cli("gen-synthetic --out " + data() + " --classes 10 --per-class 8 --seed 7"), 0);
    ASSERT_EQ(cli("train --data " + data() + " --out " + ckpt() +
                  " --epochs 1 --episodes-per-epoch 2 --n 3 --t 2 --seed 1"),
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string data() { return (root_ / "data").string(); }
  static std::string ckpt() { return (root_ / "ckpt").string(); }
  static std::string eval_flags(const std::string& out) {
    return "--data " + data() + " --ckpt-global " + ckpt() + "/global.stnt --ckpt-local " + ckpt() +
           "/local.stnt --out " + out + " --tasks 6 --n 3 --t 3 --seed 4";
  }

  static fs::path root_;
};

fs::path CliRun::root_;

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli("eval --help"), 0);
  EXPECT_EQ(cli(""), 1);
  EXPECT_EQ(cli("no-such-command"), 1);
  EXPECT_EQ(cli("gen-synthetic --out /tmp/x --bogus 1"), 1);
  EXPECT_EQ(cli("gen-synthetic --out /tmp/stn_cli_small --classes 4"), 1);
}

TEST(Cli, MissingDataIsFormatError) {
  EXPECT_EQ(cli("train --data /nonexistent/manifest.json --out /tmp/stn_cli_none"), 2);
}

TEST_F(CliRun, TrainOutputs) {
  for (const char* f : {"global.stnt", "global.stnt.json", "local.stnt", "local.stnt.json", "training_log.csv",
                        "epochs.csv", "run.json"})
    EXPECT_TRUE(fs::exists(fs::path(ckpt()) / f)) << f;
  const json run = json::parse(slurp(fs::path(ckpt()) / "run.json"));
  EXPECT_EQ(run["config"]["epochs"], 1);
  EXPECT_EQ(run["config"]["n_way"], 3);
}

TEST_F(CliRun, BadConfigIsUsageError) {
  const fs::path cfg = root_ / "bad.json";
  std::ofstream(cfg) << R"({"epochz": 3})";
  EXPECT_EQ(cli("train --data " + data() + " --config " + cfg.string() + " --out " + (root_ / "bad").string()), 1);
}

TEST_F(CliRun, EvalEndpointsMatchSingleBranchEvaluators) {
  const std::string out0 = (root_ / "a0").string(), out1 = (root_ / "a1").string();
  ASSERT_EQ(cli("eval " + eval_flags(out0) + " --alpha 0"), 0);
  ASSERT_EQ(cli("eval " + eval_flags(out1) + " --alpha 1"), 0);

  const Dataset test = load_dataset(fs::path(data()) / "manifest.json").subset(Split::Test);
  const EncoderParams g = load_checkpoint(fs::path(ckpt()) / "global.stnt").params;
  const EncoderParams l = load_checkpoint(fs::path(ckpt()) / "local.stnt").params;
  EvalSpec spec;
  spec.n_way = 3;
  spec.t_query = 3;
  spec.tasks = 6;
  spec.seed = 4;
  const auto scores = score_tasks(g, l, test, spec);
  auto single = [&](MetricKind kind) {
    return evaluate_with(scores, [kind](const TaskScores& t, std::size_t i) {
      Vector s(t.at(kind).row(i).begin(), t.at(kind).row(i).end());
      for (double& x : s) x = -x;
      return s;
    });
  };
  const json j0 = json::parse(slurp(fs::path(out0) / "eval.json"));
  const json j1 = json::parse(slurp(fs::path(out1) / "eval.json"));
  EXPECT_EQ(j0["mean"].get<double>(), single(MetricKind::Sqr).mean);
  EXPECT_EQ(j1["mean"].get<double>(), single(MetricKind::Kl).mean);
  EXPECT_EQ(j0["config"]["alpha"], 0.0);
  EXPECT_EQ(j0["tasks"], 6);

  std::stringstream csv(slurp(fs::path(out0) / "eval.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "task_id,n_way,k_shot,accuracy");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6);
}

TEST_F(CliRun, SweepHasOneRowPerGridPoint) {
  const std::string out = (root_ / "sweep").string();
  ASSERT_EQ(cli("sweep-alpha " + eval_flags(out) + " --grid 0.1:0.9:0.1"), 0);
  std::stringstream csv(slurp(fs::path(out) / "sweep_alpha.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "alpha,mean,ci95");
  std::vector<double> alphas;
  while (std::getline(csv, line)) alphas.push_back(std::stod(line.substr(0, line.find(','))));
  ASSERT_EQ(alphas.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(alphas[i], 0.1 * static_cast<double>(i + 1), 1e-12);
  EXPECT_EQ(cli("sweep-alpha " + eval_flags(out) + " --grid 0.5:2:0.5"), 1);
}

TEST_F(CliRun, AblationsAndAttention) {
  const std::string m = (root_ / "metrics").string(), f = (root_ / "fusion").string();
  ASSERT_EQ(cli("ablate-metrics " + eval_flags(m) + " --shots 1"), 0);
  const json jm = json::parse(slurp(fs::path(m) / "ablate_metrics.json"));
  EXPECT_EQ(jm["rows"].size(), 12u);  // 4 global × 3 local
  ASSERT_EQ(cli("ablate-fusion " + eval_flags(f) + " --mode adaptive --adaptive-tasks 3"), 0);
  EXPECT_TRUE(json::parse(slurp(fs::path(f) / "ablate_fusion.json"))["config"].contains("omega"));

  const fs::path image = root_ / "image.stnt";
  const Dataset ds = load_dataset(fs::path(data()) / "manifest.json");
  save_tensors(image, {image_to_tensor(ds.classes[0].images[0], "image")});
  const fs::path att = root_ / "attention.stnt";
  ASSERT_EQ(cli("export-attention --ckpt " + ckpt() + "/global.stnt --image " + image.string() + " --out " +
                att.string()),
            0);
  const TensorMap maps = load_tensors(att);
  EXPECT_NE(find_tensor(maps, "attention.layer0.head0"), nullptr);
  EXPECT_NE(find_tensor(maps, "attention.layer1.head3"), nullptr);
}

TEST_F(CliRun, CorruptCheckpointIsFormatError) {
  const fs::path bad = root_ / "corrupt.stnt";
  fs::copy_file(fs::path(ckpt()) / "global.stnt", bad);
  fs::copy_file(fs::path(ckpt()) / "global.stnt.json", root_ / "corrupt.stnt.json");
  fs::resize_file(bad, fs::file_size(bad) / 2);
  EXPECT_EQ(cli("eval --data " + data() + " --ckpt-global " + bad.string() + " --ckpt-local " + ckpt() +
                "/local.stnt --out " + (root_ / "c").string() + " --tasks 2 --n 3"),
            2);
}

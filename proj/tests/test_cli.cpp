#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(HEATSMOOTH_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::vector<std::pair<double, double>> read_curve(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<double, double>> out;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string a, b;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    out.emplace_back(std::stod(a), std::stod(b));
  }
  return out;
}

std::size_t count_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n - 1;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("hs_cli_" + std::to_string(::getpid()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string d(const std::string& name = "") const { return (dir / name).string(); }

  // Small blobs problem with a trained base model, shared by several tests.
  void make_problem() {
    ASSERT_EQ(run("gen-data --out " + d() + " --seed 3 --n-per-class 30 --spread 0.3 --split train"), 0);
    ASSERT_EQ(run("gen-data --out " + d() + " --seed 3 --n-per-class 8 --spread 0.3 --split test"), 0);
    ASSERT_EQ(run("train-base --out " + d("base") + " --seed 1 --data " + d("blobs_train.csv") +
                  " --arch 2,16,3 --epochs 30"),
              0);
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, MissingInputExitsWithTwo) {
  EXPECT_EQ(run("train-base --out " + d() + " --data " + d("nope.csv")), 2);
  EXPECT_EQ(run("certify --out " + d() + " --model " + d("nope.json") + " --data " + d("nope.csv")), 2);
}

TEST_F(Cli, BadArgumentsExitWithTwo) {
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("gen-data --out " + d() + " --kind spiral"), 2);
  EXPECT_EQ(run("smooth --out " + d()), 2);
}

TEST_F(Cli, SameSeedSameModel) {
  make_problem();
  ASSERT_EQ(run("train-base --out " + d("again") + " --seed 1 --data " + d("blobs_train.csv") +
                " --arch 2,16,3 --epochs 30"),
            0);
  const json a = read_json(dir / "base" / "train_metrics.json");
  const json b = read_json(dir / "again" / "train_metrics.json");
  EXPECT_EQ(a["model_hash"], b["model_hash"]);
  EXPECT_GT(a["train_accuracy"].get<double>(), 0.9);

  const json man = read_json(dir / "base" / "manifest_train-base.json");
  EXPECT_EQ(man["seed"], 1);
  EXPECT_TRUE(man["inputs"].contains("dataset"));
  EXPECT_TRUE(man["timing"].contains("train_seconds"));
  EXPECT_FALSE(man["params"].contains("train_seconds"));
}

TEST_F(Cli, SeedEnvironmentOverridesFlag) {
  ASSERT_EQ(std::system(("HEATSMOOTH_SEED=77 " + std::string(HEATSMOOTH_CLI_PATH) + " gen-data --seed 5 --out " + d() +
                         " >/dev/null 2>&1")
                            .c_str()),
            0);
  EXPECT_EQ(read_json(dir / "manifest_gen-data.json")["seed"], 77);
}

TEST_F(Cli, SmoothWritesEveryTimestep) {
  make_problem();
  ASSERT_EQ(run("smooth --out " + d("sm") + " --model " + d("base/model.json") + " --data " + d("blobs_train.csv") +
                " --sigma 0.1 --epochs 2"),
            0);
  for (int k = 1; k <= 5; ++k) EXPECT_TRUE(fs::exists(dir / "sm" / ("f_" + std::to_string(k) + ".json"))) << k;
  EXPECT_TRUE(fs::exists(dir / "sm" / "smoothed.json"));
  const json reports = read_json(dir / "sm" / "smooth_reports.json");
  ASSERT_EQ(reports.size(), 5u);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.contains("mean_distance"));
    EXPECT_TRUE(r.contains("mean_penalty"));
  }
  const json man = read_json(dir / "sm" / "manifest_smooth.json");
  EXPECT_EQ(man["params"]["lambda"], 5.0);
  EXPECT_EQ(man["counters"]["completed_timesteps"], 5);
}

TEST_F(Cli, CertifyCurvesAreMonotone) {
  make_problem();
  ASSERT_EQ(run("smooth --out " + d("sm") + " --model " + d("base/model.json") + " --data " + d("blobs_train.csv") +
                " --sigma 0.1 --epochs 2 --n-t 2"),
            0);
  const std::string common = " --data " + d("blobs_test.csv") + " --sigma 0.1 --out " + d("cert");
  ASSERT_EQ(run("certify --method det --model " + d("sm/smoothed.json") + common), 0);
  ASSERT_EQ(run("certify --method lbound --model " + d("sm/smoothed.json") + common), 0);
  ASSERT_EQ(run("certify --method cohen --n 500 --model " + d("base/model.json") + common), 0);
  for (const char* m : {"det", "lbound", "cohen"}) {
    const auto curve = read_curve(dir / "cert" / (std::string("curve_") + m + ".csv"));
    ASSERT_FALSE(curve.empty());
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].second, curve[i - 1].second) << m;
    EXPECT_EQ(count_rows(dir / "cert" / (std::string("certify_") + m + ".csv")), 24u);
  }
  const json man = read_json(dir / "cert" / "manifest_certify.json");
  EXPECT_EQ(man["counters"]["forward_passes"], 600 * 24);
}

TEST_F(Cli, DeterministicCertifyUsesOnePassPerExample) {
  make_problem();
  ASSERT_EQ(run("smooth --out " + d("sm") + " --model " + d("base/model.json") + " --data " + d("blobs_train.csv") +
                " --sigma 0.1 --epochs 1 --n-t 1"),
            0);
  ASSERT_EQ(run("certify --method det --threads 3 --model " + d("sm/smoothed.json") + " --data " + d("blobs_test.csv") +
                " --sigma 0.1 --out " + d("cert")),
            0);
  EXPECT_EQ(read_json(dir / "cert" / "manifest_certify.json")["counters"]["forward_passes"], 24);
  // A logits-mode base model is not a valid deterministic certificate.
  EXPECT_EQ(run("certify --method det --model " + d("base/model.json") + " --data " + d("blobs_test.csv") +
                " --out " + d("cert2")),
            2);
}

TEST_F(Cli, AttackWritesResults) {
  make_problem();
  ASSERT_EQ(run("attack --attack ddn --epsilon 3 --model " + d("base/model.json") + " --data " + d("blobs_test.csv") +
                " --out " + d("att")),
            0);
  EXPECT_EQ(count_rows(dir / "att" / "attack_ddn.csv"), 24u);
  const json m = read_json(dir / "att" / "attack_metrics_ddn.json");
  EXPECT_EQ(m["total"], 24);
  EXPECT_GT(m["successes"].get<int>(), 0);
}

TEST_F(Cli, OracleEquivalenceOnGaussian) {
  ASSERT_EQ(run("oracle equivalence --out " + d() + " --sigma 0.5 --lo -8 --hi 8 --dx 0.01"), 0);
  const json r = read_json(dir / "equivalence.json");
  EXPECT_TRUE(r["pass"].get<bool>()) << r.dump();
}

TEST_F(Cli, OracleBishop) {
  ASSERT_EQ(run("oracle bishop --out " + d() + " --sigma 0"), 0);
  EXPECT_EQ(read_json(dir / "bishop.json")["residual"], 0.0);
  ASSERT_EQ(run("oracle bishop --out " + d() + " --sigma 0.1"), 0);
  const double ratio = read_json(dir / "bishop.json")["ratio"];
  EXPECT_GE(ratio, 12.0);
  EXPECT_LE(ratio, 20.0);
}

TEST_F(Cli, OracleMcAverage) {
  make_problem();
  ASSERT_EQ(run("oracle mc-average --out " + d() + " --model " + d("base/model.json") + " --x 0.1,0.2 --n 2000"), 0);
  const json r = read_json(dir / "mc_average.json");
  EXPECT_EQ(r["mean"].size(), 3u);
  EXPECT_EQ(r["n_samples"], 2000);
  EXPECT_EQ(run("oracle mc-average --out " + d() + " --model " + d("base/model.json") + " --x 0.1"), 2);
}

TEST_F(Cli, BenchCountsPasses) {
  make_problem();
  ASSERT_EQ(run("bench --out " + d("bench") + " --model " + d("base/model.json") + " --data " + d("blobs_test.csv") +
                " --n0 10 --n 200 --examples 3"),
            0);
  const json r = read_json(dir / "bench" / "bench.json");
  EXPECT_EQ(r["deterministic"]["passes_per_example_certification"], 1.0);
  EXPECT_EQ(r["stochastic"]["passes_per_example_certification"], 210.0);
  EXPECT_GT(r["classification_time_ratio"].get<double>(), 1.0);
}

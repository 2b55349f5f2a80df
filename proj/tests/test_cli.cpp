#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace mels;
using mels::test::read_file;
using mels::test::TempDir;
using mels::test::write_file;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "mels");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::vector<std::string>> csv(const std::filesystem::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(detail::split_csv_line(line));
  return rows;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  ADD_FAILURE() << "no column " << name;
  return 0;
}

/// Simulated data (small design) plus a Model 2 style run config in `dir`.
void small_project(const TempDir& dir, long burn_in = 500, long monitor = 1000) {
  write_file(dir / "sim.json", R"({"schools": 20, "students_per_school": 10})");
  ASSERT_EQ(run({"simulate", "--config", (dir / "sim.json").string(), "--seed", "3", "--out", dir.path().string()}).code,
            kExitOk);
  write_file(dir / "fit.json", R"({"input": "data.csv", "mean_covariates": ["x"], "random_residual_variance": true,
    "chains": 2, "burn_in": )" + std::to_string(burn_in) + R"(, "monitor": )" + std::to_string(monitor) +
                                  R"(, "seed": 11, "threads": 1})");
}

}  // namespace

TEST(Cli, SupplementProtocolConverges) {
  TempDir dir;
  const auto sim = run({"simulate", "--seed", "20240101", "--out", (dir / "sim").string()});
  ASSERT_EQ(sim.code, kExitOk) << sim.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "sim" / "data.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "sim" / "truth.json"));
  write_file(dir / "fit.json", R"({"input": "sim/data.csv", "mean_covariates": ["x"], "variance_covariates": ["x"],
    "random_residual_variance": true})");
  const auto fitr = run({"fit", "--config", (dir / "fit.json").string(), "--seed", "7", "--out", (dir / "fit").string()});
  ASSERT_EQ(fitr.code, kExitOk) << fitr.err;
  const auto d = run({"diagnose", (dir / "fit").string(), "--out", (dir / "diag").string()});
  ASSERT_EQ(d.code, kExitOk) << d.err;
  const auto rows = csv(dir / "diag" / "diagnostics.csv");
  ASSERT_EQ(rows.size(), 8u);
  const auto ri = column_index(rows[0], "rhat"), ei = column_index(rows[0], "ess");
  for (std::size_t k = 1; k < rows.size(); ++k) {
    EXPECT_LT(std::stod(rows[k][ri]), 1.1) << rows[k][0];
    EXPECT_GT(std::stod(rows[k][ei]), 400.0) << rows[k][0];
  }
  const auto meta = nlohmann::json::parse(read_file(dir / "fit" / "chains" / "meta.json"));
  EXPECT_EQ(meta["mcmc"]["chains"], 4);
  EXPECT_EQ(meta["mcmc"]["burn_in"], 5000);
  EXPECT_EQ(meta["mcmc"]["monitor"], 10000);
}

TEST(Cli, FitWritesAllOutputs) {
  TempDir dir;
  small_project(dir);
  const auto r = run({"fit", "--config", (dir / "fit.json").string(), "--out", (dir / "out").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const auto* name : {"summary.csv", "diagnostics.csv", "schools.csv", "caterpillar_means.csv",
                           "caterpillar_variances.csv", "scatter_mean_variance.csv", "residuals.csv",
                           "chains/meta.json", "chains/draws.bin", "chains/data.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / name)) << name;
  EXPECT_NE(r.out.find("beta:x"), std::string::npos);
  EXPECT_NE(r.out.find("DIC"), std::string::npos);
}

TEST(Cli, SummarizeOneRowPerSchool) {
  TempDir dir;
  small_project(dir);
  ASSERT_EQ(run({"fit", "--config", (dir / "fit.json").string(), "--out", (dir / "out").string()}).code, kExitOk);
  const auto r = run({"summarize", (dir / "out").string(), "--out", (dir / "sum").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = csv(dir / "sum" / "schools.csv");
  ASSERT_EQ(rows.size(), 21u);
  for (const auto* col : {"school", "n", "u_cons_mean", "v_mean", "sigma2e_mean", "mean_rank", "variance_rank"})
    column_index(rows[0], col);
  std::vector<int> mean_ranks, var_ranks;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    mean_ranks.push_back(std::stoi(rows[k][column_index(rows[0], "mean_rank")]));
    var_ranks.push_back(std::stoi(rows[k][column_index(rows[0], "variance_rank")]));
  }
  std::sort(mean_ranks.begin(), mean_ranks.end());
  std::sort(var_ranks.begin(), var_ranks.end());
  for (int k = 0; k < 20; ++k) {
    EXPECT_EQ(mean_ranks[static_cast<std::size_t>(k)], k + 1);
    EXPECT_EQ(var_ranks[static_cast<std::size_t>(k)], k + 1);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "sum" / "report.csv"));
}

TEST(Cli, CompareAgainstItselfIsPerfect) {
  TempDir dir;
  small_project(dir);
  ASSERT_EQ(run({"fit", "--config", (dir / "fit.json").string(), "--out", (dir / "out").string()}).code, kExitOk);
  const auto r = run({"compare", (dir / "out").string(), (dir / "out").string(), "--out", (dir / "cmp").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = csv(dir / "cmp" / "compare.csv");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1][1], "20");
  for (std::size_t k = 2; k < rows.size(); ++k) EXPECT_EQ(std::stod(rows[k][1]), 1.0) << rows[k][0];
  EXPECT_EQ(csv(dir / "cmp" / "compare_schools.csv").size(), 21u);
}

TEST(Cli, FixedSeedByteIdenticalAcrossRunsAndThreads) {
  TempDir dir;
  small_project(dir, 200, 400);
  const auto cfg = (dir / "fit.json").string();
  ASSERT_EQ(run({"fit", "--config", cfg, "--seed", "5", "--out", (dir / "a").string()}).code, kExitOk);
  ASSERT_EQ(run({"fit", "--config", cfg, "--seed", "5", "--out", (dir / "b").string()}).code, kExitOk);
  ASSERT_EQ(run({"fit", "--config", cfg, "--seed", "5", "--threads", "2", "--out", (dir / "c").string()}).code,
            kExitOk);
  ASSERT_EQ(run({"fit", "--config", cfg, "--seed", "6", "--out", (dir / "d").string()}).code, kExitOk);
  for (const auto* name : {"summary.csv", "schools.csv", "diagnostics.csv", "residuals.csv", "chains/draws.bin"}) {
    EXPECT_EQ(read_file(dir / "a" / name), read_file(dir / "b" / name)) << name;
    EXPECT_EQ(read_file(dir / "a" / name), read_file(dir / "c" / name)) << name;
  }
  EXPECT_NE(read_file(dir / "a" / "summary.csv"), read_file(dir / "d" / "summary.csv"));
}

TEST(Cli, CommandLineOverridesConfig) {
  TempDir dir;
  small_project(dir);
  ASSERT_EQ(run({"fit", "--config", (dir / "fit.json").string(), "--chains", "3", "--burnin", "100", "--monitor",
                 "150", "--out", (dir / "o").string()})
                .code,
            kExitOk);
  const auto meta = nlohmann::json::parse(read_file(dir / "o" / "chains" / "meta.json"));
  EXPECT_EQ(meta["chains"].size(), 3u);
  EXPECT_EQ(meta["mcmc"]["burn_in"], 100);
  EXPECT_EQ(meta["chains"][0]["draws"], 150);
}

TEST(Cli, BadInputsFailWithMessage) {
  TempDir dir;
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"fit"}).code, kExitUsage);
  EXPECT_EQ(run({"fit", "--config", (dir / "missing.json").string()}).code, kExitUsage);
  EXPECT_EQ(run({"diagnose", (dir / "nowhere").string()}).code, kExitUsage);

  write_file(dir / "bad.csv", "school_id,y,x\nA,1,2\nB,oops,3\n");
  write_file(dir / "fit.json", R"({"input": "bad.csv", "mean_covariates": ["x"]})");
  auto r = run({"fit", "--config", (dir / "fit.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("non-numeric value 'oops'"), std::string::npos) << r.err;

  write_file(dir / "typo.json", R"({"input": "bad.csv", "mean_covariates": ["x"], "chians": 2})");
  r = run({"fit", "--config", (dir / "typo.json").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("chians"), std::string::npos);

  write_file(dir / "good.csv", "school_id,y,x\nA,1,2\nB,0.5,3\n");
  write_file(dir / "unk.json", R"({"input": "good.csv", "mean_covariates": ["ks3"]})");
  r = run({"fit", "--config", (dir / "unk.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("ks3"), std::string::npos);

  std::filesystem::create_directories(dir / "empty_fit");
  r = run({"summarize", (dir / "empty_fit").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("meta.json"), std::string::npos);
}

TEST(Cli, NonConvergenceExitsDistinctlyButWritesOutputs) {
  TempDir dir;
  small_project(dir);
  const auto r = run({"fit", "--config", (dir / "fit.json").string(), "--chains", "4", "--burnin", "0", "--monitor",
                      "100", "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitNotConverged) << r.err;
  EXPECT_NE(r.err.find("R-hat"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "o" / "summary.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "o" / "chains" / "meta.json"));
  EXPECT_EQ(run({"diagnose", (dir / "o").string()}).code, kExitNotConverged);
}

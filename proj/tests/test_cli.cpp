#include <gtest/gtest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef SAMA_CLI_PATH
#error "SAMA_CLI_PATH must name the sama_cli binary"
#endif

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::path(::testing::TempDir()) /
           ("sama_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  static std::string read(const std::string& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  /// Runs the CLI with `args`; `env` is prepended to the command line.
  CliResult run(const std::string& args, const std::string& env = "env -u SAMA_SEED") const {
    const std::string err_file = path("stderr.txt");
    const std::string cmd = env + " '" + std::string(SAMA_CLI_PATH) + "' " + args + " > '" +
                            path("stdout.txt") + "' 2> '" + err_file + "'";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read(err_file);
    return r;
  }

  fs::path dir_;
};

const char* small_config =
    "seed = 3\n"
    "[regress]\n"
    "meta_steps = 4\n"
    "unroll = 5\n"
    "[reweight]\n"
    "n = 200\n"
    "n_test = 50\n"
    "m = 12\n"
    "epochs = 1\n"
    "unroll = 4\n"
    "[gradcheck]\n"
    "cases = 10\n"
    "adapt_cases = 20\n"
    "[bench]\n"
    "n = 200\n"
    "unrolls = 1\n"
    "meta_steps = 1\n"
    "warmup = 1\n";

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("regress --bogus").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, UnknownConfigKeyNamesLineAndKey) {
  const auto cfg = write("bad.cfg", "seed = 1\n[regress]\nmeta_steps = 2\nmeta_stpes = 3\n");
  const auto r = run("regress --config '" + cfg + "'");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(":4"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("meta_stpes"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingConfigFileIsConfigError) {
  EXPECT_EQ(run("regress --config '" + path("nope.cfg") + "'").code, 2);
}

TEST_F(Cli, FlagsThatDoNotApplyAreRejected) {
  EXPECT_EQ(run("gradcheck --workers 2").code, 2);
  EXPECT_EQ(run("regress --workers 2").code, 2);
  EXPECT_EQ(run("regress --method magic").code, 2);
  EXPECT_EQ(run("regress", "SAMA_SEED=abc").code, 2);
}

TEST_F(Cli, ExperimentFailureExitsOne) {
  const auto cfg = write("diverge.cfg", "[regress]\nbase_lr = 1000\nunroll = 50\nmeta_steps = 5\n");
  const auto r = run("regress --config '" + cfg + "' --out '" + path("r.csv") + "'");
  EXPECT_EQ(r.code, 1) << r.err;
  EXPECT_NE(r.err.find("meta step"), std::string::npos) << r.err;
}

TEST_F(Cli, RegressWritesVersionedCsv) {
  const auto cfg = write("c.cfg", small_config);
  const auto out = path("regress.csv");
  ASSERT_EQ(run("regress --config '" + cfg + "' --out '" + out + "' --method exact_ift").code, 0);
  std::istringstream csv(read(out));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "# schema: sama-regress/1");
  std::getline(csv, line);
  EXPECT_EQ(line, "step,method,cosine_to_closed_form,lambda_l2_dist,meta_grad_norm");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    EXPECT_NE(line.find(",exact_ift,1,"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 4);
}

TEST_F(Cli, SeedPrecedenceFlagEnvFile) {
  const auto cfg = write("c.cfg", small_config);
  auto output = [&](const std::string& extra, const std::string& env) {
    const auto out = path("o.csv");
    EXPECT_EQ(run("regress --method sama --config '" + cfg + "' --out '" + out + "' " + extra, env)
                  .code,
              0);
    return read(out);
  };
  const auto file_seed = output("", "env -u SAMA_SEED");
  const auto same_as_file = output("--seed 3", "env -u SAMA_SEED");
  const auto env_seed = output("", "SAMA_SEED=8");
  const auto flag_over_env = output("--seed 3", "SAMA_SEED=8");
  EXPECT_EQ(file_seed, same_as_file);
  EXPECT_NE(file_seed, env_seed);
  EXPECT_EQ(flag_over_env, file_seed);
}

TEST_F(Cli, ReweightIsByteDeterministicAndWritesSummary) {
  const auto cfg = write("c.cfg", small_config);
  const auto a = path("a.csv"), b = path("b.csv");
  ASSERT_EQ(run("reweight --config '" + cfg + "' --out '" + a + "'").code, 0);
  ASSERT_EQ(run("reweight --config '" + cfg + "' --out '" + b + "'").code, 0);
  EXPECT_EQ(read(a), read(b));
  EXPECT_EQ(read(path("a.summary.json")), read(path("b.summary.json")));
  const auto summary = nlohmann::json::parse(read(path("a.summary.json")));
  for (const char* m : {"baseline", "sama_na", "sama"}) {
    EXPECT_TRUE(summary["final"].contains(m)) << m;
  }
}

TEST_F(Cli, ReweightWithWorkersWritesCommReports) {
  const auto cfg = write("c.cfg", small_config);
  const auto out = path("w.csv");
  ASSERT_EQ(run("reweight --config '" + cfg + "' --out '" + out + "' --workers 2 --method sama").code,
            0);
  std::istringstream lines(read(path("w.comm.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["sync_count"], 1);
    EXPECT_EQ(j["mode"], "deferred");
    ++n;
  }
  EXPECT_GT(n, 0);
}

TEST_F(Cli, GradcheckPassesAndBenchRuns) {
  const auto cfg = write("c.cfg", small_config);
  const auto g = run("gradcheck --config '" + cfg + "' --out '" + path("g.csv") + "'");
  EXPECT_EQ(g.code, 0) << g.err;
  EXPECT_NE(g.err.find("0 failed"), std::string::npos);
  const auto b = run("bench --config '" + cfg + "' --method sama --out '" + path("b.csv") + "'");
  EXPECT_EQ(b.code, 0) << b.err;
  EXPECT_NE(read(path("b.csv")).find("method,workers,unroll,throughput,peak_bytes,sync_count"),
            std::string::npos);
}

TEST_F(Cli, GradcheckFailureExitsOne) {
  const auto cfg = write("strict.cfg", "[gradcheck]\ncases = 5\nadapt_cases = 8\ntolerance = 1e-30\n");
  EXPECT_EQ(run("gradcheck --config '" + cfg + "'").code, 1);
}

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SURGFLOW_CLI_PATH;

int sh(const std::string& cmd) {
  const std::string full = "bash -c 'set -o pipefail; " + cmd + "' >/dev/null 2>&1";
  const int rc = std::system(full.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "surgflow_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ASSERT_EQ(sh(kCli + " simulate --spec clean --n 6 --seed 3 --out " + p("data")), 0);
    ASSERT_EQ(sh(kCli + " train --data " + p("data") + " --out " + p("models") +
                 " --kind bn_hmm --set gibbs_samples=300 --set gibbs_burn_in=30"),
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static std::string p(const std::string& rel) { return (dir_ / rel).string(); }
  static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, SimulateIsDeterministic) {
  ASSERT_EQ(sh(kCli + " simulate --spec clean --n 6 --seed 3 --out " + p("data2")), 0);
  for (const char* f : {"manifest.json", "taxonomy.txt", "S001.frames.csv", "S006.tools.csv", "S003.obs.jsonl"}) {
    EXPECT_EQ(slurp(dir_ / "data" / f), slurp(dir_ / "data2" / f)) << f;
  }
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(sh(kCli + " simulate --spec " + p("missing.json") + " --out " + p("x")), 2);
  EXPECT_EQ(sh(kCli + " simulate --bogus"), 2);
  EXPECT_EQ(sh(kCli + " train --data " + p("data") + " --out " + p("m2") + " --set nonsense=1"), 2);
  EXPECT_EQ(sh(kCli + " report"), 2);
  EXPECT_EQ(sh(kCli + " --help"), 0);
}

TEST_F(Cli, MissingInputsExitTwo) {
  EXPECT_EQ(sh(kCli + " run --models " + p("no_models") + " --input " + p("data/S001.obs.jsonl")), 2);
  EXPECT_EQ(sh(kCli + " run --models " + p("models") + " --input " + p("no_input.jsonl")), 2);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  std::ofstream(dir_ / "plain_file") << "x";
  EXPECT_EQ(sh(kCli + " simulate --spec clean --n 2 --out " + p("plain_file/sub")), 1);
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(sh(kCli + " train --data " + p("data") + " --out " + p("models2") +
               " --kind bn_hmm --set gibbs_samples=300 --set gibbs_burn_in=30"),
            0);
  for (const auto& e : fs::directory_iterator(dir_ / "models")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "models2" / e.path().filename())) << e.path().filename();
  }
}

TEST_F(Cli, RunStreamsAndSurvivesMalformedLines) {
  const std::string in = p("data/S002.obs.jsonl");
  const auto n_in = lines(slurp(in)).size();
  ASSERT_EQ(sh(kCli + " run --no-latency --models " + p("models") + " --input " + in + " > " + p("out1.jsonl")), 0);
  ASSERT_EQ(sh("cat " + in + " | " + kCli + " run --no-latency --models " + p("models") + " > " + p("out2.jsonl")), 0);
  const auto out1 = slurp(dir_ / "out1.jsonl");
  EXPECT_EQ(out1, slurp(dir_ / "out2.jsonl"));
  EXPECT_EQ(lines(out1).size(), n_in);
  EXPECT_NE(out1.find("\"latency_ms\":null"), std::string::npos);

  // A garbage line in the middle yields one error record; later windows still decode.
  auto src = lines(slurp(in));
  std::ofstream(dir_ / "bad.jsonl") << src[0] << "\n{oops\n" << src[1] << "\n";
  ASSERT_EQ(sh(kCli + " run --no-latency --models " + p("models") + " --input " + p("bad.jsonl") + " > " +
               p("out3.jsonl")),
            0);
  const auto out3 = lines(slurp(dir_ / "out3.jsonl"));
  ASSERT_EQ(out3.size(), 3u);
  EXPECT_NE(out3[1].find("\"error\""), std::string::npos);
  EXPECT_NE(out3[1].find("\"line\":2"), std::string::npos);
  EXPECT_NE(out3[2].find("\"window_index\":2"), std::string::npos);
}

TEST_F(Cli, ClosedPipeIsNotAnError) {
  EXPECT_EQ(sh(kCli + " run --models " + p("models") + " --input " + p("data/S001.obs.jsonl") + " | head -n 1"), 0);
}

TEST_F(Cli, EvaluateAndReport) {
  ASSERT_EQ(sh(kCli + " evaluate --data " + p("data") + " --out " + p("eval") +
               " --pipelines hhmm,bn_hmm --folds 2 --svg --no-throughput --set gibbs_samples=300"),
            0);
  for (const char* f : {"evaluation.json", "folds.csv", "per_label.csv", "table.md", "hhmm_fold0_steps.svg"}) {
    EXPECT_TRUE(fs::exists(dir_ / "eval" / f)) << f;
  }
  ASSERT_EQ(sh(kCli + " report --in " + p("eval/evaluation.json") + " --out " + p("table2.md")), 0);
  EXPECT_EQ(slurp(dir_ / "table2.md"), slurp(dir_ / "eval" / "table.md"));
}

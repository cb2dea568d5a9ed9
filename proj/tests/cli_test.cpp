#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cli.hpp"

namespace f2at {
namespace {

namespace fs = std::filesystem;

struct Result {
  int status = 0;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.status = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("f2at_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir(const std::string& name) const { return dir_ / name; }

  // A training run small enough for a unit test.
  static std::vector<std::string> small_train(const std::string& method, const fs::path& out) {
    return {"train", "--method", method, "--seed", "3", "--epochs", "2", "--batch-size", "32", "--lr", "0.0015",
            "--augment", "off", "--train-size", "96", "--test-size", "32", "--steps", "2", "--probe-size", "16",
            "--probe-steps", "1", "--out-dir", out.string()};
  }

  fs::path dir_;
};

bool one_line(const std::string& s) { return !s.empty() && s.find('\n') == s.size() - 1; }

TEST_F(CliTest, MiVerifyAllResidualsExact) {
  const Result r = run_cli({"mi-verify", "--trials", "100", "--seed", "7", "--out-dir", dir("m").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  std::ifstream in(dir("m") / "mi_verify.jsonl");
  std::string line;
  std::size_t identity_lines = 0, five_term_lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const std::string name = j.at("name");
    if (j.at("suite") == "identities") {
      ++identity_lines;
      EXPECT_LE(j.at("residual").get<double>(), 1e-12) << line;
    } else if (name == "decomposition.five_term") {
      ++five_term_lines;
      EXPECT_LE(j.at("residual").get<double>(), 1e-12) << line;
    }
  }
  EXPECT_GT(identity_lines, 100u);
  EXPECT_GT(five_term_lines, 0u);
}

TEST_F(CliTest, SliceOfSaturatedImage) {
  write_file(dir("img.txt"), "8 1 2 3\n255 255 255\n255 255 255\n");
  const Result r = run_cli({"slice", "--k", "2", "--input", dir("img.txt").string(), "--out-dir", dir("s").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_file(dir("s") / "pattern_pairs.txt"), "8 2 1 2 3\n192 192 192\n192 192 192\n63 63 63\n63 63 63\n");
  EXPECT_NE(r.out.find("natural [192, 192] perturbed [63, 63]"), std::string::npos) << r.out;
  const std::string csv = read_file(dir("s") / "discrepancy.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,discrepancy_ratio");
}

TEST_F(CliTest, DegenerateF2atMatchesSat) {
  auto sat = small_train("sat", dir("sat"));
  auto f2at = small_train("f2at", dir("f2at"));
  for (auto* args : {&sat, &f2at}) args->insert(args->end(), {"--alpha", "0", "--gamma", "0"});
  ASSERT_EQ(run_cli(sat).status, 0);
  ASSERT_EQ(run_cli(f2at).status, 0);
  const std::string metrics = read_file(dir("sat") / "metrics.jsonl");
  EXPECT_FALSE(metrics.empty());
  EXPECT_EQ(metrics, read_file(dir("f2at") / "metrics.jsonl"));
  EXPECT_EQ(read_file(dir("sat") / "checkpoint.f2at"), read_file(dir("f2at") / "checkpoint.f2at"));
}

TEST_F(CliTest, TrainTwiceIsByteIdentical) {
  ASSERT_EQ(run_cli(small_train("f2at", dir("a"))).status, 0);
  ASSERT_EQ(run_cli(small_train("f2at", dir("b"))).status, 0);
  EXPECT_EQ(read_file(dir("a") / "metrics.jsonl"), read_file(dir("b") / "metrics.jsonl"));
  EXPECT_EQ(read_file(dir("a") / "checkpoint.f2at"), read_file(dir("b") / "checkpoint.f2at"));
  EXPECT_TRUE(fs::exists(dir("a") / "timing.jsonl"));
  EXPECT_EQ(read_file(dir("a") / "metrics.jsonl").find("wall"), std::string::npos);
}

TEST_F(CliTest, ManifestReplayReproducesTheRun) {
  ASSERT_EQ(run_cli(small_train("f2at", dir("first"))).status, 0);
  const auto manifest = nlohmann::json::parse(read_file(dir("first") / "manifest.json"));
  EXPECT_EQ(manifest.at("subcommand"), "train");
  EXPECT_EQ(manifest.at("config").at("tau"), "0.07");
  EXPECT_EQ(manifest.at("config").at("epochs"), "2");
  const Result r = run_cli({"train", "--manifest", (dir("first") / "manifest.json").string(), "--out-dir",
                            dir("replay").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_file(dir("first") / "metrics.jsonl"), read_file(dir("replay") / "metrics.jsonl"));
  EXPECT_EQ(read_file(dir("first") / "checkpoint.f2at"), read_file(dir("replay") / "checkpoint.f2at"));

  const Result wrong = run_cli({"eval", "--manifest", (dir("first") / "manifest.json").string()});
  EXPECT_EQ(wrong.status, 2);
  EXPECT_NE(wrong.err.find("'train'"), std::string::npos) << wrong.err;
}

TEST_F(CliTest, ConfigFileAndFlagPrecedence) {
  write_file(dir("run.conf"), "# desk run\nk = 4\nalpha = 0.5\nout_dir = " + dir("from_file").string() + "\n");
  const Result r = run_cli({"slice", "--config", dir("run.conf").string(), "--k", "3", "--count", "2"});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto manifest = nlohmann::json::parse(read_file(dir("from_file") / "manifest.json"));
  EXPECT_EQ(manifest.at("config").at("k"), "3");

  write_file(dir("bad.conf"), "k = 2\nfoo = 1\n");
  const Result bad = run_cli({"train", "--config", dir("bad.conf").string(), "--out-dir", dir("x").string()});
  EXPECT_EQ(bad.status, 2);
  EXPECT_TRUE(one_line(bad.err)) << bad.err;
  EXPECT_NE(bad.err.find("bad.conf:2: unknown key 'foo'"), std::string::npos) << bad.err;
  EXPECT_FALSE(fs::exists(dir("x") / "metrics.jsonl"));
}

TEST_F(CliTest, OutDirFallsBackToEnvironment) {
  ASSERT_EQ(::setenv("F2AT_OUT", dir("env").string().c_str(), 1), 0);
  const Result r = run_cli({"mi-verify", "--trials", "2"});
  ::unsetenv("F2AT_OUT");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir("env") / "mi_verify.jsonl"));
  EXPECT_TRUE(fs::exists(dir("env") / "manifest.json"));
}

TEST_F(CliTest, RejectionsNameTheToken) {
  struct Case {
    std::vector<std::string> args;
    std::string token;
  };
  const std::vector<Case> cases = {
      {{"frobnicate"}, "frobnicate"},
      {{"train", "--bogus", "1"}, "--bogus"},
      {{"mi-verify", "--epochs", "1"}, "--epochs"},
      {{"train", "--epochs", "ten"}, "ten"},
      {{"train", "--k", "9"}, "--k"},
      {{"train", "--method", "trades"}, "trades"},
      {{"train", "--dataset", "imagenet"}, "imagenet"},
      {{"train", "--epsilon", "2"}, "epsilon"},
      {{"attack", "--checkpoint", "/nonexistent/ckpt.f2at"}, "/nonexistent/ckpt.f2at"},
      {{"train", "--config", "/nonexistent/run.conf"}, "/nonexistent/run.conf"},
      {{"eval", "--attacks", "fgsm,cw"}, "cw"},
  };
  for (const Case& c : cases) {
    std::vector<std::string> args = c.args;
    args.insert(args.end(), {"--out-dir", dir("r").string()});
    if (c.args[0] == "frobnicate") args.resize(1);
    const Result r = run_cli(args);
    EXPECT_NE(r.status, 0) << c.args[0];
    EXPECT_TRUE(one_line(r.err)) << r.err;
    EXPECT_NE(r.err.find(c.token), std::string::npos) << r.err;
  }
  EXPECT_FALSE(fs::exists(dir("r") / "metrics.jsonl"));
}

TEST_F(CliTest, EvalAttackReportAndKSweepOutputs) {
  ASSERT_EQ(run_cli(small_train("sat", dir("t"))).status, 0);
  const std::string ckpt = (dir("t") / "checkpoint.f2at").string();
  const std::vector<std::string> data = {"--train-size", "96", "--test-size", "32"};
  const auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), data.begin(), data.end());
    return run_cli(args);
  };

  Result r = with({"eval", "--checkpoint", "sat=" + ckpt, "--surrogate", ckpt, "--attacks", "fgsm,pgd3", "--out-dir",
                   dir("e").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream eval(read_file(dir("e") / "eval.csv"));
  std::string header, white, black;
  std::getline(eval, header);
  std::getline(eval, white);
  std::getline(eval, black);
  EXPECT_EQ(header, "defense,mode,clean,fgsm,pgd3");
  EXPECT_EQ(white.substr(0, 10), "sat,white-");
  EXPECT_EQ(black.substr(0, 10), "sat,black-");

  r = with({"attack", "--checkpoint", ckpt, "--method", "fgsm", "--out-dir", dir("a").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string attack = read_file(dir("a") / "attack.csv");
  EXPECT_EQ(std::count(attack.begin(), attack.end(), '\n'), 33);

  r = with({"report", "--checkpoint", ckpt, "--attack", "fgsm", "--bins", "4", "--out-dir", dir("p").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string hist = read_file(dir("p") / "confidence_histogram.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 5);
  EXPECT_TRUE(fs::exists(dir("p") / "class_frequency.csv"));
  EXPECT_TRUE(fs::exists(dir("p") / "margins.csv"));

  r = with({"ksweep", "--k-values", "2,8", "--attacks", "fgsm", "--epochs", "1", "--batch-size", "32", "--steps", "1",
            "--probe-size", "0", "--out-dir", dir("k").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream ks(read_file(dir("k") / "ksweep.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(ks, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "k,clean,fgsm");
  EXPECT_EQ(lines[1].substr(0, 2), "2,");
  EXPECT_EQ(lines[2].substr(0, 2), "8,");
}

TEST_F(CliTest, HelpAndVersion) {
  EXPECT_EQ(run_cli({"--version"}).out, std::string("f2at ") + cli::kToolVersion + "\n");
  const Result help = run_cli({"train", "--help"});
  EXPECT_EQ(help.status, 0);
  EXPECT_NE(help.out.find("--upsilon"), std::string::npos);
}

}  // namespace
}  // namespace f2at

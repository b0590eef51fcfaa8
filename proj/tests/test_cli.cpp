#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int status = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string("GNNRELOC_LOG=quiet ") + GNNRELOC_CLI_PATH + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("gnnreloc_cli_" + std::to_string(getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void generate(const std::string& name, int seed = 0) {
    const CliResult r = cli("generate --out " + path(name) + " --seed " + std::to_string(seed) +
                      " --train-count 40 --test-count 6 --emb-dim 8 --feat-dim 8");
    ASSERT_EQ(r.status, 0) << r.out;
  }

  CliResult train(const std::string& scene, const std::string& ckpt, const std::string& extra = "", int epochs = 1) {
    return cli("train --data " + path(scene) + " --out " + path(ckpt) + " --epochs " + std::to_string(epochs) +
               " --nodes 5 --stride 2 --attention-factor 2 --lr 1e-3 " + extra);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, RejectsUnknownFlagsAndBadValues) {
  EXPECT_EQ(cli("generate --out " + path("x") + " --bogus 3").status, 2);
  EXPECT_EQ(cli("").status, 2);
  EXPECT_EQ(cli("generate --out " + path("x") + " --train-count 0").status, 3);
  EXPECT_EQ(cli("eval --ckpt " + path("missing.ckpt") + " --db a --queries b").status, 3);
  EXPECT_EQ(cli("--help").status, 0);
}

TEST_F(CliTest, GenerateIsSeedDeterministic) {
  generate("a", 3);
  generate("b", 3);
  generate("c", 4);
  EXPECT_EQ(slurp(path("a") + "/train.gnnr"), slurp(path("b") + "/train.gnnr"));
  EXPECT_EQ(slurp(path("a") + "/test.gnnr"), slurp(path("b") + "/test.gnnr"));
  EXPECT_NE(slurp(path("a") + "/train.gnnr"), slurp(path("c") + "/train.gnnr"));
  EXPECT_TRUE(fs::exists(path("a") + "/manifest.json"));
}

TEST_F(CliTest, OutputStartsWithConfig) {
  generate("s");
  const CliResult r = train("s", "m.ckpt");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(r.out.rfind("config.", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("config.rounds=2"), std::string::npos);
}

TEST_F(CliTest, TrainingIsSeedDeterministic) {
  generate("s");
  ASSERT_EQ(train("s", "a.ckpt").status, 0);
  ASSERT_EQ(train("s", "b.ckpt").status, 0);
  ASSERT_EQ(train("s", "c.ckpt", "--seed 1").status, 0);
  EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
  EXPECT_NE(slurp(path("a.ckpt")), slurp(path("c.ckpt")));
  ASSERT_EQ(train("s", "z.ckpt", "", 0).status, 0);
  EXPECT_TRUE(fs::exists(path("z.ckpt")));
}

TEST_F(CliTest, EvalIsRepeatableAndRespectsRounds) {
  generate("s");
  ASSERT_EQ(train("s", "m.ckpt").status, 0);
  const std::string base =
      "eval --ckpt " + path("m.ckpt") + " --db " + path("s/train.gnnr") + " --queries " + path("s/test.gnnr");
  const CliResult a = cli(base), b = cli(base);
  ASSERT_EQ(a.status, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("geometric_averaging=0"), std::string::npos) << a.out;
  EXPECT_NE(a.out.find("query index=5 "), std::string::npos);

  const CliResult g = cli(base + " --geom-avg");
  ASSERT_EQ(g.status, 0);
  EXPECT_NE(g.out.find("geometric_averaging=1"), std::string::npos) << g.out;

  EXPECT_EQ(cli(base + " --rounds 2").status, 0);
  EXPECT_EQ(cli(base + " --rounds 1").status, 3);
  const CliResult forced = cli(base + " --rounds 1 --force-rounds");
  EXPECT_EQ(forced.status, 0);
  EXPECT_NE(forced.out, a.out);
}

TEST_F(CliTest, LocalizeAcceptsTextQueries) {
  generate("s");
  ASSERT_EQ(train("s", "m.ckpt").status, 0);
  std::ofstream(path("q.txt")) << "dims 8 8\nq0 1 0 0 0 0 0 0 0 0.1 0.2 0.3 0.4 0.5 0.6 0.7 0.8 0 0 0 0 1 0 0 0\n";
  const CliResult r = cli("localize --ckpt " + path("m.ckpt") + " --db " + path("s/train.gnnr") + " --queries " +
                    path("q.txt"));
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("q0"), std::string::npos) << r.out;
}

TEST_F(CliTest, GradcheckPassesAndCatchesInjectedBug) {
  const CliResult ok = cli("gradcheck --width 8 --attention-factor 2 --nodes 3 --samples 4");
  EXPECT_EQ(ok.status, 0) << ok.out;
  EXPECT_EQ(cli("gradcheck --width 8 --attention-factor 2 --nodes 3 --samples 4 --rounds 1").status, 0);
  const CliResult bad = cli("gradcheck --width 8 --attention-factor 2 --nodes 3 --samples 4 --inject-bug");
  EXPECT_EQ(bad.status, 1) << bad.out;
}

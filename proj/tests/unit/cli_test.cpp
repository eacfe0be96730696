#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "support.hpp"

namespace xmal {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct CliRun {
  int code = -1;
  std::string out, err;

  std::string status() const {
    std::string s = out;
    while (!s.empty() && s.back() == '\n') s.pop_back();
    const auto nl = s.rfind('\n');
    return nl == std::string::npos ? s : s.substr(nl + 1);
  }
  // Value following "<key> " on its own line in stdout.
  std::string field(const std::string& key) const {
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind(key + " ", 0) == 0) return line.substr(key.size() + 1);
    }
    return "";
  }
};

CliRun xmal(std::vector<std::string> args) {
  args.insert(args.begin(), "xmal");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Cli, UsageErrorsExitTwo) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"frobnicate"},
           {"gen-data"},
           {"gen-data", "--out", "x", "--bogus", "1"},
           {"train", "--stage", "3", "--data", "m.tsv", "--out", "o"},
           {"eval", "--checkpoint", "c", "--data", "m", "--level", "0"},
           {"extract", "--what", "words", "--checkpoint", "c", "--data", "m", "--out", "o"},
       }) {
    const CliRun r = xmal(args);
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_EQ(r.status().rfind("status=usage-error code=2", 0), 0u) << r.status();
  }
}

TEST(Cli, HelpExitsZero) {
  const CliRun r = xmal({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST(Cli, MissingFilesAreRuntimeErrors) {
  TempDir dir;
  const CliRun r = xmal({"extract", "--what", "global", "--checkpoint", (dir / "none.xmal").string(), "--data",
                      (dir / "manifest.tsv").string(), "--out", (dir / "e.bin").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.status(), "status=error code=1 command=extract kind=missing-file");
}

class CliFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>("xmal-cli");
    ::setenv("XMAL_CACHE_DIR", (dir() / "cache").c_str(), 1);
    const CliRun g = xmal({"gen-data", "--subjects", "6", "--images-per-subject", "4", "--captions", "2", "--seed", "3",
                        "--out", (dir() / "data").string()});
    ASSERT_EQ(g.code, 0) << g.err;
    std::ofstream(dir() / "tiny.json")
        << R"({"stage1": {"epochs": 1}, "stage2": {"epochs": 1, "milestones": [], "optimizer": "adam", "lr": 0.001}})";
  }
  static void TearDownTestSuite() {
    ::unsetenv("XMAL_CACHE_DIR");
    dir_.reset();
  }

  static const fs::path& dir() { return dir_->path(); }
  static std::string manifest() { return (dir() / "data" / "manifest.tsv").string(); }
  static std::string config() { return (dir() / "tiny.json").string(); }

  inline static std::unique_ptr<TempDir> dir_;
};

TEST_F(CliFixture, GenDataIsDeterministicPerSeed) {
  auto gen = [](const std::string& seed, const std::string& name) {
    return xmal({"gen-data", "--subjects", "6", "--images-per-subject", "4", "--captions", "2", "--seed", seed,
                 "--out", (dir() / name).string()});
  };
  const CliRun a = gen("3", "a"), b = gen("3", "b"), c = gen("4", "c");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.status(), "status=ok code=0 command=gen-data");
  EXPECT_EQ(a.field("records"), "24");
  EXPECT_EQ(a.field("subjects"), "6");
  EXPECT_EQ(a.field("captions"), "48");
  EXPECT_EQ(a.field("checksum"), b.field("checksum"));
  EXPECT_NE(a.field("checksum"), c.field("checksum"));
  EXPECT_EQ(slurp(dir() / "a" / "manifest.tsv"), slurp(dir() / "b" / "manifest.tsv"));
}

TEST_F(CliFixture, StageTwoNeedsAStageOneBundle) {
  const CliRun r = xmal({"train", "--stage", "2", "--data", manifest(), "--out", (dir() / "s2").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--from-stage1"), std::string::npos);
  const CliRun s1 = xmal({"train", "--stage", "1", "--data", manifest(), "--out", (dir() / "s1").string(),
                       "--from-stage1", "x.xmal"});
  EXPECT_EQ(s1.code, 2);
}

TEST_F(CliFixture, UnknownConfigKeyIsMalformed) {
  std::ofstream(dir() / "bad.json") << R"({"stage1": {"epochz": 3}})";
  const CliRun r = xmal({"train", "--stage", "1", "--config", (dir() / "bad.json").string(), "--data", manifest(), "--out",
                      (dir() / "bad").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.status(), "status=error code=1 command=train kind=malformed");
}

TEST_F(CliFixture, EncoderCheckpointExtractsGlobalsOnly) {
  const std::string enc = (dir() / "enc.xmal").string();
  const CliRun init = xmal({"init-encoder", "--out", enc});
  ASSERT_EQ(init.code, 0) << init.err;
  EXPECT_EQ(init.field("checksum").size(), 16u);

  auto extract = [&](const std::string& what, const std::string& out) {
    return xmal({"extract", "--what", what, "--checkpoint", enc, "--data", manifest(), "--out", (dir() / out).string()});
  };
  const CliRun a = extract("global", "g1.bin"), b = extract("global", "g2.bin");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.field("rows"), "24");
  EXPECT_EQ(slurp(dir() / "g1.bin"), slurp(dir() / "g2.bin"));
  EXPECT_EQ(slurp(dir() / "g1.bin.ids"), slurp(dir() / "g2.bin.ids"));

  const CliRun caption = extract("caption", "c.bin");
  EXPECT_EQ(caption.code, 1);
  EXPECT_EQ(caption.status(), "status=error code=1 command=extract kind=config-mismatch");

  const CliRun tgfr = xmal({"eval", "--method", "tgfr", "--checkpoint", enc, "--data", manifest()});
  EXPECT_EQ(tgfr.code, 1);
}

TEST_F(CliFixture, TrainEvalExtractEndToEnd) {
  const std::string run = (dir() / "run").string();
  const CliRun s1 = xmal({"train", "--stage", "1", "--config", config(), "--data", manifest(), "--out", run});
  ASSERT_EQ(s1.code, 0) << s1.err;
  EXPECT_TRUE(fs::exists(dir() / "run" / "stage1.xmal"));
  EXPECT_NE(s1.out.find("epoch {"), std::string::npos);
  const CliRun s2 = xmal({"train", "--stage", "2", "--config", config(), "--data", manifest(), "--out", run,
                       "--from-stage1", run + "/stage1.xmal"});
  ASSERT_EQ(s2.code, 0) << s2.err;
  const std::string bundle = run + "/stage2_fcfm.xmal";
  ASSERT_TRUE(fs::exists(bundle));

  const CliRun verify = xmal({"eval", "--mode", "verify", "--method", "tgfr", "--checkpoint", bundle, "--data",
                           manifest(), "--far", "0.1", "--out", (dir() / "ev").string()});
  ASSERT_EQ(verify.code, 0) << verify.err;
  EXPECT_TRUE(fs::exists(dir() / "ev" / "report.json"));
  EXPECT_EQ(slurp(dir() / "ev" / "roc.csv").rfind("threshold,far,tar\n", 0), 0u);

  const CliRun two = xmal({"eval", "--mode", "verify", "--method", "tgfr", "--method", "image-only", "--checkpoint",
                        bundle, "--data", manifest()});
  EXPECT_EQ(two.code, 2);

  // FLF was never trained into this bundle.
  const CliRun flf = xmal({"eval", "--method", "flf", "--checkpoint", bundle, "--data", manifest()});
  EXPECT_EQ(flf.code, 1);

  auto fused = [&](const std::string& out) {
    return xmal({"extract", "--what", "fused", "--checkpoint", bundle, "--data", manifest(), "--out",
                 (dir() / out).string(), "--deterministic"});
  };
  ASSERT_EQ(fused("f1.bin").code, 0);
  ASSERT_EQ(fused("f2.bin").code, 0);
  EXPECT_EQ(slurp(dir() / "f1.bin"), slurp(dir() / "f2.bin"));
}

TEST_F(CliFixture, IdentifyWithoutGalleryFails) {
  // Copy the dataset with every gallery record removed.
  const fs::path data = dir() / "nogallery";
  fs::create_directories(data);
  fs::copy(dir() / "data" / "images", data / "images", fs::copy_options::recursive);
  fs::copy_file(dir() / "data" / "vocab.txt", data / "vocab.txt");
  std::ifstream in(dir() / "data" / "manifest.tsv");
  std::ofstream out(data / "manifest.tsv");
  std::string line;
  while (std::getline(in, line)) {
    if (line.find("\tgallery\t") == std::string::npos) out << line << "\n";
  }
  out.close();
  const std::string enc = (dir() / "enc2.xmal").string();
  ASSERT_EQ(xmal({"init-encoder", "--out", enc}).code, 0);
  const CliRun r = xmal({"eval", "--mode", "identify", "--method", "image-only", "--checkpoint", enc, "--data",
                      (data / "manifest.tsv").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.status().rfind("status=error code=1 command=eval", 0), 0u);
}

}  // namespace
}  // namespace xmal

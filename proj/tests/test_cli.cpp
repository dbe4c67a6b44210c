// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "memprop/cli.hpp"
#include "memprop/training.hpp"

using namespace memprop;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  return {code, o.str(), e.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

fs::path small_corpus(const fs::path& root) {
  fs::remove_all(root);
  fs::create_directories(root);
  synth::CorpusConfig c;
  c.height = c.width = 32;
  c.frames = 6;
  c.train_matting = 2;
  c.train_segmentation = 1;
  c.val_matting = 1;
  c.test_matting = 0;
  write_json(root / "corpus.json", c.to_json());
  const Result r = run({"datagen", "--config", (root / "corpus.json").string(), "--out", (root / "data").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  return root / "data" / "manifest.json";
}

nlohmann::json tiny_train_config(int iterations) {
  training::TrainConfig t;
  t.model.encoder_widths = {4, 4, 6, 6, 8};
  t.model.key_dim = 4;
  t.model.value_dim = 6;
  t.model.value_widths = {4, 4, 4, 4};
  t.model.change_hidden = 4;
  t.model.fusion_blocks = 1;
  t.model.fusion_hidden = 8;
  t.model.decoder_widths = {6, 6, 4, 4, 4};
  t.batch_size = 1;
  for (auto& s : t.stages) {
    s.iterations = iterations;
    s.long_from = iterations;
  }
  return t.to_json();
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"train", "--help"}).code, 0);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"train", "--bogus"}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  const Result r = run({"eval", "--manifest", "/nonexistent/manifest.json", "--predictions", "p", "--out", "o.csv"});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, BadConfigAndCheckpointAreUserErrors) {
  const fs::path root = fs::temp_directory_path() / "memprop_cli_bad";
  const fs::path manifest = small_corpus(root);
  std::ofstream(root / "bad.json") << "{\"model\": {\"key_dim\": \"x\"}}";
  Result r = run({"train", "--config", (root / "bad.json").string(), "--manifest", manifest.string(), "--stage", "1", "--out",
                  (root / "m.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("config error"), std::string::npos);
  r = run({"train", "--manifest", manifest.string(), "--stage", "2", "--out", (root / "m.ckpt").string()});
  EXPECT_EQ(r.code, 1);
  std::ofstream(root / "junk.ckpt") << "not a checkpoint";
  r = run({"infer", "--checkpoint", (root / "junk.ckpt").string(), "--manifest", manifest.string(), "--out",
           (root / "pred").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bad header"), std::string::npos);
}

TEST(Cli, SeedPrecedenceFlagOverEnvOverConfig) {
  const fs::path root = fs::temp_directory_path() / "memprop_cli_seed";
  fs::remove_all(root);
  fs::create_directories(root);
  synth::CorpusConfig c;
  c.height = c.width = 32;
  c.frames = 2;
  c.train_matting = 1;
  c.train_segmentation = 0;
  c.val_matting = 0;
  c.test_matting = 0;
  c.static_clips = 0;
  c.seed = 1;
  write_json(root / "corpus.json", c.to_json());
  const std::string cfg = (root / "corpus.json").string();
  auto frame = [&](const std::string& dir) { return slurp(root / dir / "train_mat_00/frames/00000.png"); };

  ::unsetenv("MEMPROP_MATTE_SEED");
  ASSERT_EQ(run({"datagen", "--config", cfg, "--out", (root / "cfg1").string()}).code, 0);
  ASSERT_EQ(run({"datagen", "--config", cfg, "--out", (root / "flag2").string(), "--seed", "2"}).code, 0);
  ::setenv("MEMPROP_MATTE_SEED", "2", 1);
  ASSERT_EQ(run({"datagen", "--config", cfg, "--out", (root / "env2").string()}).code, 0);
  ASSERT_EQ(run({"datagen", "--config", cfg, "--out", (root / "flag1").string(), "--seed", "1"}).code, 0);
  ::setenv("MEMPROP_MATTE_SEED", "banana", 1);
  EXPECT_EQ(run({"datagen", "--config", cfg, "--out", (root / "bad").string()}).code, 1);
  ::unsetenv("MEMPROP_MATTE_SEED");

  EXPECT_NE(frame("cfg1"), frame("flag2"));
  EXPECT_EQ(frame("flag2"), frame("env2"));
  EXPECT_EQ(frame("flag1"), frame("cfg1"));
}

TEST(Cli, EndToEndPipeline) {
  const fs::path root = fs::temp_directory_path() / "memprop_cli_e2e";
  const fs::path manifest = small_corpus(root);
  write_json(root / "train.json", tiny_train_config(3));
  const std::string ck1 = (root / "s1.ckpt").string(), ck2 = (root / "s2.ckpt").string();
  Result r = run({"train", "--config", (root / "train.json").string(), "--manifest", manifest.string(), "--stage", "1",
                  "--out", ck1, "--log-every", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(ck1 + ".losses.csv"));
  r = run({"train", "--manifest", manifest.string(), "--stage", "2", "--init", ck1, "--out", ck2});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(training::load_checkpoint(ck2).state.stage, 2);

  r = run({"infer", "--checkpoint", ck2, "--manifest", manifest.string(), "--split", "val", "--out", (root / "pred").string(),
           "--warmup-iters", "2", "--preview"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "pred/val_mat_00/00005.png"));
  EXPECT_TRUE(fs::exists(root / "pred/infer.json"));

  // Clip-directory mode on the same clip.
  r = run({"infer", "--checkpoint", ck2, "--clip", (root / "data/val_mat_00").string(), "--mask",
           (root / "data/val_mat_00/alpha/00000.png").string(), "--out", (root / "single").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "single/00005.png"));

  r = run({"eval", "--manifest", manifest.string(), "--predictions", (root / "pred").string(), "--split", "val", "--out",
           (root / "report.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(root / "report.csv");
  EXPECT_EQ(csv.rfind("clip_id,mad,", 0), 0u);
  EXPECT_NE(csv.find("val_mat_00,"), std::string::npos);

  // Missing predictions: the report is still written, the exit code says so.
  r = run({"eval", "--manifest", manifest.string(), "--predictions", (root / "pred").string(), "--split", "train", "--out",
           (root / "report2.csv").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(fs::exists(root / "report2.csv"));
}

TEST(Cli, ResumeContinuesTheLossCsv) {
  const fs::path root = fs::temp_directory_path() / "memprop_cli_resume";
  const fs::path manifest = small_corpus(root);
  write_json(root / "train.json", tiny_train_config(4));
  const std::string cfg = (root / "train.json").string();
  // Straight run.
  ASSERT_EQ(run({"train", "--config", cfg, "--manifest", manifest.string(), "--stage", "1", "--out", (root / "a.ckpt").string()}).code,
            0);
  // Interrupted run: 2 iterations, then resume to 4.
  ASSERT_EQ(run({"train", "--config", cfg, "--manifest", manifest.string(), "--stage", "1", "--out", (root / "b.ckpt").string(),
                 "--iterations", "2"})
                .code,
            0);
  ASSERT_EQ(run({"train", "--manifest", manifest.string(), "--stage", "1", "--init", (root / "b.ckpt").string(), "--out",
                 (root / "b.ckpt").string(), "--iterations", "4"})
                .code,
            0);
  EXPECT_EQ(slurp(root / "a.ckpt.losses.csv"), slurp(root / "b.ckpt.losses.csv"));
}

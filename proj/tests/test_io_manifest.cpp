// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "memprop/image_io.hpp"
#include "memprop/manifest.hpp"
#include "oracles.hpp"

using namespace memprop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("memprop_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Png, SixteenBitRoundTripWithinQuantization) {
  std::mt19937_64 rng(1);
  const Tensor img = oracle::random_tensor({1, 1, 9, 7}, rng, 0.0, 1.0);
  const fs::path dir = scratch("png16");
  write_png(dir / "a.png", img, 16);
  const Tensor back = read_png(dir / "a.png");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 65535.0 + 1e-12);
}

TEST(Png, EightBitRgbRoundTrip) {
  Tensor img({1, 3, 2, 2});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(i * 20) / 255.0;
  const fs::path dir = scratch("png8");
  write_png(dir / "a.png", img, 8);
  const Tensor back = read_png(dir / "a.png");
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_DOUBLE_EQ(back[i], img[i]);
}

TEST(Png, ErrorsAreTyped) {
  const fs::path dir = scratch("pngerr");
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
  std::ofstream(dir / "junk.png") << "not a png";
  EXPECT_THROW(read_png(dir / "junk.png"), IoError);
  EXPECT_THROW(write_png(dir / "x.png", Tensor({1, 2, 4, 4}), 8), ShapeError);
  EXPECT_THROW(write_png(dir / "x.png", Tensor({1, 1, 4, 4}), 12), IoError);
  EXPECT_EQ(frame_filename(7), "00007.png");
}

TEST(Manifest, JsonRoundTripAndErrors) {
  Manifest m;
  m.seed = 9;
  ClipManifest c;
  c.clip_id = "a";
  c.frame_count = 3;
  c.height = c.width = 16;
  c.frames_dir = "a/frames";
  c.alpha_dir = "a/alpha";
  c.mask_dir = "a/mask";
  m.clips.push_back(c);
  const nlohmann::json j = to_json(m);
  const Manifest back = manifest_from_json(j, "/tmp");
  ASSERT_EQ(back.clips.size(), 1u);
  EXPECT_EQ(back.clips[0].alpha_dir, "a/alpha");
  EXPECT_EQ(back.seed, 9u);
  EXPECT_THROW(back.find("zzz"), InputError);

  nlohmann::json bad = j;
  bad["version"] = "other";
  EXPECT_THROW(manifest_from_json(bad, "/tmp"), ConfigError);
  bad = j;
  bad["clips"][0].erase("frame_count");
  EXPECT_THROW(manifest_from_json(bad, "/tmp"), ConfigError);
  bad = j;
  bad["clips"][0]["data_kind"] = "audio";
  EXPECT_THROW(manifest_from_json(bad, "/tmp"), ConfigError);
}

TEST(Manifest, MissingFramesDetected) {
  const fs::path dir = scratch("manifest");
  Manifest m;
  m.root = dir;
  ClipManifest c;
  c.clip_id = "a";
  c.frame_count = 3;
  c.height = c.width = 16;
  c.frames_dir = "a/frames";
  c.alpha_dir = "a/alpha";
  m.clips.push_back(c);
  write_sequence(dir / "a/frames", Tensor({3, 3, 16, 16}, 0.5), 8);
  write_sequence(dir / "a/alpha", Tensor({2, 1, 16, 16}, 0.5), 16);
  EXPECT_THROW(validate_manifest_files(m), InputError);
  write_sequence(dir / "a/alpha", Tensor({3, 1, 16, 16}, 0.5), 16);
  EXPECT_NO_THROW(validate_manifest_files(m));
  save_manifest(m, dir / "manifest.json");
  const Manifest back = load_manifest(dir / "manifest.json");
  const LoadedClip lc = load_clip(back, back.clips[0]);
  EXPECT_EQ(lc.clip.length(), 3);
  ASSERT_TRUE(lc.alpha.has_value());
  EXPECT_EQ(lc.alpha->alpha.shape(), (Shape{3, 1, 16, 16}));
}

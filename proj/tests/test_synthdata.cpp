// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>

#include "memprop/synthdata.hpp"
#include "oracles.hpp"

using namespace memprop;
using namespace memprop::synth;
namespace fs = std::filesystem;

namespace {

SceneSpec one_disk(double soft = 2.0) {
  SceneSpec s;
  s.height = s.width = 32;
  Primitive p;
  p.cx = p.cy = 16;
  p.rx = 6;
  p.color = {0.9, 0.2, 0.1};
  p.vx = 0.3;
  s.foreground.push_back(p);
  s.soft_edge = soft;
  return s;
}

}  // namespace

TEST(Render, CompositingIdentityHolds) {
  SceneSpec s = one_disk();
  Primitive d;
  d.kind = Primitive::Kind::RoundedRect;
  d.cx = 8;
  d.cy = 24;
  d.rx = 5;
  d.ry = 3;
  d.color = {0.1, 0.8, 0.3};
  s.distractors.push_back(d);
  const RenderedClip r = render_clip(s, 5);
  for (int t = 0; t < 5; ++t)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const double a = r.alpha.alpha.at(t, 0, y, x);
          EXPECT_NEAR(r.clip.frames.at(t, c, y, x), a * r.foreground.at(t, c, y, x) + (1 - a) * r.background.at(t, c, y, x), 1e-15);
        }
  EXPECT_EQ(r.mask.mask.storage(), binarize_alpha(r.alpha.alpha, 128).storage());
  EXPECT_NO_THROW(r.clip.validate());
}

TEST(Render, AlphaFollowsSignedDistance) {
  const RenderedClip r = render_clip(one_disk(2.0), 1);
  // Center fully opaque, far corner fully transparent, boundary fractional.
  EXPECT_EQ(r.alpha.alpha.at(0, 0, 16, 16), 1.0);
  EXPECT_EQ(r.alpha.alpha.at(0, 0, 0, 0), 0.0);
  const double sd = std::hypot(22.5 - 16, 16.5 - 16) - 6;
  EXPECT_NEAR(r.alpha.alpha.at(0, 0, 16, 22), std::clamp(0.5 - sd / 2.0, 0.0, 1.0), 1e-15);
}

TEST(Render, HardEdgesAreBinary) {
  const RenderedClip r = render_clip(one_disk(0.0), 3);
  EXPECT_TRUE(is_binary(r.alpha.alpha));
}

TEST(Render, OverlappingTargetsStayInRange) {
  SceneSpec s = one_disk();
  Primitive q = s.foreground[0];
  q.cx = 19;
  q.color = {0.1, 0.1, 0.9};
  s.foreground.push_back(q);
  const RenderedClip r = render_clip(s, 2);
  EXPECT_GE(r.alpha.alpha.min(), 0.0);
  EXPECT_LE(r.alpha.alpha.max(), 1.0);
  // Where the front disk is opaque, the composite carries its color.
  EXPECT_NEAR(r.clip.frames.at(0, 0, 16, 14), 0.9, 1e-12);
}

TEST(Render, Errors) {
  SceneSpec s = one_disk();
  s.foreground[0].vx = 10;  // runs off the 32 px canvas
  EXPECT_THROW(render_clip(s, 8), InputError);
  SceneSpec none = one_disk();
  none.foreground.clear();
  EXPECT_THROW(render_clip(none, 1), ConfigError);
  SceneSpec odd = one_disk();
  odd.width = 30;
  EXPECT_THROW(render_clip(odd, 1), ConfigError);
  EXPECT_THROW(render_clip(one_disk(), 0), InputError);
}

TEST(EdgeCoverage, Ramp) {
  EXPECT_EQ(edge_coverage(-5, 2), 1.0);
  EXPECT_EQ(edge_coverage(5, 2), 0.0);
  EXPECT_DOUBLE_EQ(edge_coverage(0, 2), 0.5);
  EXPECT_EQ(edge_coverage(0, 0), 1.0);
}

TEST(MaskAugmentation, FrequenciesMatchConfig) {
  AugmentationSpec spec;
  Rng rng(8);
  std::map<MaskAugmentation::Op, int> counts;
  std::map<int, int> kernels;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const MaskAugmentation a = draw_mask_augmentation(spec, rng);
    ++counts[a.op];
    ++kernels[a.kernel];
  }
  EXPECT_NEAR(counts[MaskAugmentation::Op::Erode] / double(n), 0.4, 0.02);
  EXPECT_NEAR(counts[MaskAugmentation::Op::Dilate] / double(n), 0.4, 0.02);
  EXPECT_NEAR(counts[MaskAugmentation::Op::Identity] / double(n), 0.2, 0.02);
  for (int k : {1, 3, 5}) EXPECT_NEAR(kernels[k] / double(n), 1.0 / 3, 0.02);
}

TEST(MaskAugmentation, ErodeShrinksDilateGrows) {
  const RenderedClip r = render_clip(one_disk(), 1);
  const Tensor m = r.mask.mask;
  const Tensor e = apply_mask_augmentation(m, {MaskAugmentation::Op::Erode, 5});
  const Tensor d = apply_mask_augmentation(m, {MaskAugmentation::Op::Dilate, 5});
  EXPECT_LT(e.sum(), m.sum());
  EXPECT_GT(d.sum(), m.sum());
  for (std::size_t i = 0; i < m.numel(); ++i) {
    EXPECT_LE(e[i], m[i]);
    EXPECT_GE(d[i], m[i]);
  }
  Rng rng(1);
  EXPECT_THROW(augment_given_mask(r.alpha.alpha, {}, rng), InputError);
  AugmentationSpec bad;
  bad.kernels = {2};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SelectInstances, NonEmptyUniformSubsets) {
  std::vector<Tensor> inst;
  for (int i = 0; i < 3; ++i) {
    Tensor m({1, 1, 4, 4});
    m[static_cast<std::size_t>(i)] = 1.0;
    inst.push_back(m);
  }
  std::map<std::vector<bool>, int> seen;
  for (std::uint64_t s = 0; s < 7000; ++s) {
    const InstanceSelection sel = select_instances(inst, s);
    ++seen[sel.chosen];
    int on = 0;
    for (bool b : sel.chosen) on += b;
    ASSERT_GE(on, 1);
    for (std::size_t p = 0; p < sel.target.numel(); ++p) ASSERT_EQ(sel.target[p] * sel.background[p], 0.0);
  }
  EXPECT_EQ(seen.size(), 7u);
  for (const auto& [k, v] : seen) EXPECT_NEAR(v / 7000.0, 1.0 / 7, 0.02);
  EXPECT_THROW(select_instances({}, 1), InputError);
}

TEST(SequenceSampling, WindowProperties) {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const int len = 3 + trial % 6, clip = 8 + trial % 20, maxi = 1 + trial % 5;
    const SequenceWindow w = sample_training_sequence(clip, len, maxi, rng, 0.5);
    ASSERT_EQ(static_cast<int>(w.indices.size()), len);
    ASSERT_GE(w.indices.front(), 0);
    ASSERT_LT(w.indices.back(), clip);
    for (int i = 1; i < len; ++i) {
      const int g = w.indices[i] - w.indices[i - 1];
      ASSERT_GE(g, 1);
      ASSERT_LE(g, maxi);
    }
  }
  // Exactly fitting clip: every gap is 1.
  const SequenceWindow tight = sample_training_sequence(5, 5, 4, rng);
  EXPECT_EQ(tight.indices, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_THROW(sample_training_sequence(3, 5, 1, rng), InputError);
  EXPECT_THROW(sample_training_sequence(10, 0, 1, rng), ConfigError);
}

TEST(SequenceSampling, ManifestOverloadIsSeededAndBounded) {
  ClipManifest c;
  c.frame_count = 24;
  const SequenceWindow a = sample_training_sequence(c, 8, 4, 99), b = sample_training_sequence(c, 8, 4, 99);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_THROW(sample_training_sequence(c, 2, 4, 1), ConfigError);
  EXPECT_THROW(sample_training_sequence(c, 9, 4, 1), ConfigError);
}

TEST(MotionAugment, FirstFrameIsIdentityAndRangeKept) {
  Rng rng(4);
  const RenderedClip r = render_clip(one_disk(), 1);
  auto [frames, mattes] = motion_augment(r.clip.frames, r.alpha.alpha, 4, {}, rng);
  EXPECT_EQ(frames.shape(), (Shape{4, 3, 32, 32}));
  const Tensor f0 = frames.slice0(0), a0 = mattes.slice0(0);
  for (std::size_t i = 0; i < f0.numel(); ++i) EXPECT_NEAR(f0[i], r.clip.frames[i], 1e-12);
  for (std::size_t i = 0; i < a0.numel(); ++i) EXPECT_NEAR(a0[i], r.alpha.alpha[i], 1e-12);
  EXPECT_GE(mattes.min(), 0.0);
  EXPECT_LE(mattes.max(), 1.0);
  EXPECT_THROW(motion_augment(r.clip.frames, r.clip.frames, 4, {}, rng), ShapeError);
}

TEST(Corpus, GeneratesDeterministically) {
  CorpusConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.frames = 6;
  cfg.train_matting = 2;
  cfg.train_segmentation = 1;
  cfg.val_matting = 1;
  cfg.test_matting = 0;
  const fs::path a = fs::temp_directory_path() / "memprop_corpus_a", b = fs::temp_directory_path() / "memprop_corpus_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const Manifest ma = generate_corpus(cfg, a);
  generate_corpus(cfg, b);
  ASSERT_EQ(ma.clips.size(), 4u);
  EXPECT_EQ(ma.clips[0].clip_id, "train_mat_00");
  EXPECT_NO_THROW(validate_manifest_files(load_manifest(a / "manifest.json")));
  for (const auto& c : ma.clips) {
    const LoadedClip la = load_clip(ma, c);
    const Manifest mb = load_manifest(b / "manifest.json");
    const LoadedClip lb = load_clip(mb, mb.find(c.clip_id));
    EXPECT_EQ(la.clip.frames.storage(), lb.clip.frames.storage());
    EXPECT_EQ(la.mask.mask.storage(), lb.mask.mask.storage());
    EXPECT_EQ(c.data_kind == DataKind::Matting, la.alpha.has_value());
    EXPECT_GT(la.mask.frame(0).sum(), 0.0);
  }
  // The first training clip is static.
  const LoadedClip s = load_clip(ma, ma.clips[0]);
  for (int t = 1; t < 6; ++t) EXPECT_EQ(s.clip.frame(t).storage(), s.clip.frame(0).storage());
}

TEST(Corpus, ConfigJson) {
  CorpusConfig c;
  c.frames = 10;
  EXPECT_EQ(CorpusConfig::from_json(c.to_json()).frames, 10);
  nlohmann::json j = c.to_json();
  j["fps"] = 30;
  EXPECT_THROW(CorpusConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["height"] = 40;
  EXPECT_THROW(CorpusConfig::from_json(j).validate(), ConfigError);
  j = c.to_json();
  j["frames"] = "many";
  EXPECT_THROW(CorpusConfig::from_json(j), ConfigError);
}

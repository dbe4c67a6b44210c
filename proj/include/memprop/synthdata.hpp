// SPDX-License-Identifier: Apache-2.0
//
// Procedural matting clips with closed-form alpha, plus training-time
// augmentations and the corpus generator behind `datagen`.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "json.hpp"
#include "memprop/core_types.hpp"
#include "memprop/manifest.hpp"

namespace memprop::synth {

using Rng = std::mt19937_64;
using Color = std::array<double, 3>;

struct Primitive {
  enum class Kind { Disk, RoundedRect };
  Kind kind = Kind::Disk;
  double cx = 0.0, cy = 0.0;      // center at t = 0 (pixels)
  double rx = 8.0, ry = 8.0;      // disk uses rx as radius; rect half extents
  double corner = 2.0;            // rounded-rect corner radius
  double rotation = 0.0;          // radians at t = 0
  Color color{1.0, 1.0, 1.0};
  // Motion: center(t) = c + v*t + amp * sin(omega*t + phase)
  double vx = 0.0, vy = 0.0;
  double amp_x = 0.0, amp_y = 0.0, omega = 0.0, phase = 0.0;
  double scale_rate = 0.0;  // scale(t) = 1 + scale_rate * t
  double spin = 0.0;        // radians per frame

  /// Signed distance (negative inside) of pixel center (px, py) at frame t.
  double signed_distance(double px, double py, int t) const;
  /// Axis-aligned bounds at frame t: {x0, y0, x1, y1}.
  std::array<double, 4> bounds(int t) const;
};

struct BackgroundSpec {
  Color base{0.4, 0.4, 0.4};
  Color amplitude{0.2, 0.2, 0.2};
  double freq_x = 0.2, freq_y = 0.15;  // radians per pixel
  double drift = 0.0;                  // pixels per frame
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 64, width = 64;
  std::vector<Primitive> foreground;   // targets
  std::vector<Primitive> distractors;  // rendered into the background layer
  double soft_edge = 2.0;              // ramp width in pixels; 0 gives hard edges
  BackgroundSpec background;

  void validate() const;
};

struct RenderedClip {
  VideoClip clip;
  AlphaSequence alpha;
  SegMaskSequence mask;  // binarize_alpha(alpha, 128)
  Tensor foreground;     // F layer [T,3,H,W]
  Tensor background;     // B layer [T,3,H,W]
};

/// Coverage of a pixel at signed distance sd for ramp width e.
double edge_coverage(double sd, double e);

RenderedClip render_clip(const SceneSpec& spec, int frames);

struct MotionRange {
  double max_shift = 4.0;     // pixels over the whole sequence
  double max_scale = 0.05;    // relative
  double max_rotation = 0.1;  // radians
};

struct AugmentationSpec {
  MotionRange motion;
  double reverse_prob = 0.5;
  double erode_prob = 0.4;
  double dilate_prob = 0.4;
  std::vector<int> kernels{1, 3, 5};

  void validate() const;
};

struct MaskAugmentation {
  enum class Op { Identity, Erode, Dilate };
  Op op = Op::Identity;
  int kernel = 1;
};

MaskAugmentation draw_mask_augmentation(const AugmentationSpec& spec, Rng& rng);
Tensor apply_mask_augmentation(const Tensor& mask, const MaskAugmentation& aug);
/// Draw and apply in one step.
Tensor augment_given_mask(const Tensor& mask, const AugmentationSpec& spec, Rng& rng);

struct InstanceSelection {
  std::vector<bool> chosen;
  Tensor target;      // union of chosen instances
  Tensor background;  // union of the rest, minus the target
};

/// Uniformly samples a nonempty subset of the instances as the target.
InstanceSelection select_instances(const std::vector<Tensor>& instances, std::uint64_t seed);

struct SequenceWindow {
  std::vector<int> indices;  // strictly increasing
  bool reversed = false;     // play back in reverse order
};

SequenceWindow sample_training_sequence(int clip_length, int length, int max_interval, Rng& rng, double reverse_prob = 0.0);
SequenceWindow sample_training_sequence(const ClipManifest& clip, int length, int max_interval, std::uint64_t seed);

/// Turns one image/alpha pair ([1,3,H,W], [1,1,H,W]) into a sequence by a
/// progressive random similarity warp.
std::pair<Tensor, Tensor> motion_augment(const Tensor& image, const Tensor& alpha, int length, const MotionRange& range,
                                         Rng& rng);

struct CorpusConfig {
  std::uint64_t seed = 7;
  int height = 64;
  int width = 64;
  int frames = 24;
  int train_matting = 4;
  int train_segmentation = 4;
  int val_matting = 2;
  int test_matting = 2;
  int static_clips = 1;  // leading train matting clips rendered without motion
  double min_soft_edge = 1.0;
  double max_soft_edge = 3.0;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

/// Random scene for one clip. Static scenes have no motion at all.
SceneSpec random_scene(const CorpusConfig& cfg, std::uint64_t seed, DataKind kind, bool is_static);

/// Renders the corpus to out_dir and writes out_dir/manifest.json.
Manifest generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace memprop::synth

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include "memprop/tensor.hpp"

namespace memprop {

/// Raised for malformed configuration values (bad thresholds, even kernels...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inputs that violate a documented precondition.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DataKind { Matting, Segmentation };
enum class Split { Train, Val, Test };

std::string_view to_string(DataKind k);
std::string_view to_string(Split s);
DataKind parse_data_kind(std::string_view s);
Split parse_split(std::string_view s);

/// T frames of RGB in [0,1], stored [T,3,H,W].
struct VideoClip {
  Tensor frames;
  double frame_rate = 25.0;

  int length() const { return frames.dim(0); }
  int height() const { return frames.dim(2); }
  int width() const { return frames.dim(3); }
  Tensor frame(int t) const { return frames.slice0(t); }

  /// Throws InputError unless T >= 1, values in [0,1] and H, W divisible by 16.
  void validate() const;
};

/// Per-frame alpha in [0,1], stored [T,1,H,W].
struct AlphaSequence {
  Tensor alpha;

  int length() const { return alpha.dim(0); }
  Tensor frame(int t) const { return alpha.slice0(t); }
  void clamp();
  void validate_against(const VideoClip& clip) const;
};

/// Binary masks, stored [T,1,H,W].
struct SegMaskSequence {
  Tensor mask;

  int length() const { return mask.dim(0); }
  Tensor frame(int t) const { return mask.slice0(t); }
  void validate() const;
};

/// Disjoint cover of the pixel grid. Each mask has the shape of the source.
struct RegionPartition {
  Tensor core_fg;
  Tensor core_bg;
  Tensor boundary;

  Tensor core() const;  ///< core_fg + core_bg
  bool is_valid() const;
};

struct RegionThresholds {
  double fg = 0.99;
  double bg = 0.01;
};

RegionPartition make_region_partition(const Tensor& alpha, RegionThresholds thresholds = {});

/// Square-window morphology on every HxW plane of an NCHW binary tensor.
/// Windows are clipped at the image border.
Tensor erode(const Tensor& mask, int kernel);
Tensor dilate(const Tensor& mask, int kernel);

/// core_fg = erode(mask), core_bg = !dilate(mask), boundary = dilate - erode.
RegionPartition trimap_from_segmask(const Tensor& mask, int kernel);

/// mask = (alpha * 255 >= threshold_255).
Tensor binarize_alpha(const Tensor& alpha, int threshold_255);

bool is_binary(const Tensor& t);

}  // namespace memprop

// SPDX-License-Identifier: Apache-2.0
#include "memprop/core_types.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace memprop {

std::string_view to_string(DataKind k) { return k == DataKind::Matting ? "matting" : "segmentation"; }

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

DataKind parse_data_kind(std::string_view s) {
  if (s == "matting") return DataKind::Matting;
  if (s == "segmentation") return DataKind::Segmentation;
  throw ConfigError("unknown data_kind '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

void VideoClip::validate() const {
  if (frames.rank() != 4 || frames.dim(1) != 3) throw InputError("VideoClip: frames must be [T,3,H,W], got " + shape_str(frames.shape()));
  if (length() < 1) throw InputError("VideoClip: empty clip");
  if (height() % 16 != 0 || width() % 16 != 0) {
    throw InputError("VideoClip: height and width must be divisible by 16, got " + shape_str(frames.shape()));
  }
  for (double v : frames.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("VideoClip: frame values must lie in [0,1]");
  }
}

void AlphaSequence::clamp() {
  for (auto& v : alpha.values()) v = std::clamp(v, 0.0, 1.0);
}

void AlphaSequence::validate_against(const VideoClip& clip) const {
  if (alpha.rank() != 4 || alpha.dim(1) != 1 || alpha.dim(0) != clip.length() || alpha.dim(2) != clip.height() ||
      alpha.dim(3) != clip.width()) {
    throw InputError("AlphaSequence " + shape_str(alpha.shape()) + " does not pair with clip " + shape_str(clip.frames.shape()));
  }
}

void SegMaskSequence::validate() const {
  if (mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) < 1) throw InputError("SegMaskSequence: expected [T,1,H,W]");
  if (!is_binary(mask)) throw InputError("SegMaskSequence: mask must be binary");
}

Tensor RegionPartition::core() const {
  Tensor out = core_fg;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += core_bg[i];
  return out;
}

bool RegionPartition::is_valid() const {
  if (!core_fg.same_shape(core_bg) || !core_fg.same_shape(boundary)) return false;
  for (std::size_t i = 0; i < core_fg.numel(); ++i) {
    const double a = core_fg[i], b = core_bg[i], c = boundary[i];
    if (a + b + c != 1.0 || a * b != 0.0 || a * c != 0.0 || b * c != 0.0) return false;
  }
  return true;
}

RegionPartition make_region_partition(const Tensor& alpha, RegionThresholds thresholds) {
  if (!(thresholds.bg >= 0.0 && thresholds.bg < thresholds.fg && thresholds.fg <= 1.0)) {
    throw ConfigError("region thresholds must satisfy 0 <= bg < fg <= 1");
  }
  if (!alpha.all_finite()) throw InputError("make_region_partition: non-finite alpha");
  RegionPartition p{Tensor(alpha.shape()), Tensor(alpha.shape()), Tensor(alpha.shape())};
  for (std::size_t i = 0; i < alpha.numel(); ++i) {
    const double a = alpha[i];
    if (a >= thresholds.fg) {
      p.core_fg[i] = 1.0;
    } else if (a <= thresholds.bg) {
      p.core_bg[i] = 1.0;
    } else {
      p.boundary[i] = 1.0;
    }
  }
  return p;
}

namespace {

void check_kernel(int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("morphology kernel must be odd and >= 1, got " + std::to_string(kernel));
}

// Separable running extremum over a (2r+1) window, clipped at borders.
Tensor morph(const Tensor& mask, int kernel, bool take_max) {
  check_kernel(kernel);
  if (mask.rank() != 4) throw ShapeError("morphology expects NCHW, got " + shape_str(mask.shape()));
  const int r = kernel / 2;
  const int planes = mask.dim(0) * mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  Tensor tmp(mask.shape()), out(mask.shape());
  auto pick = [take_max](double a, double b) { return take_max ? std::max(a, b) : std::min(a, b); };
  for (int p = 0; p < planes; ++p) {
    const double* src = mask.data() + static_cast<std::size_t>(p) * h * w;
    double* t = tmp.data() + static_cast<std::size_t>(p) * h * w;
    double* d = out.data() + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = src[y * w + x];
        for (int k = std::max(0, x - r); k <= std::min(w - 1, x + r); ++k) v = pick(v, src[y * w + k]);
        t[y * w + x] = v;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = t[y * w + x];
        for (int k = std::max(0, y - r); k <= std::min(h - 1, y + r); ++k) v = pick(v, t[k * w + x]);
        d[y * w + x] = v;
      }
    }
  }
  return out;
}

}  // namespace

Tensor erode(const Tensor& mask, int kernel) { return morph(mask, kernel, false); }
Tensor dilate(const Tensor& mask, int kernel) { return morph(mask, kernel, true); }

RegionPartition trimap_from_segmask(const Tensor& mask, int kernel) {
  check_kernel(kernel);
  if (!is_binary(mask)) throw InputError("trimap_from_segmask: mask must be binary");
  Tensor inner = erode(mask, kernel);
  Tensor outer = dilate(mask, kernel);
  RegionPartition p{inner, Tensor(mask.shape()), Tensor(mask.shape())};
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    p.core_bg[i] = 1.0 - outer[i];
    p.boundary[i] = outer[i] - inner[i];
  }
  return p;
}

Tensor binarize_alpha(const Tensor& alpha, int threshold_255) {
  if (threshold_255 < 0 || threshold_255 > 255) throw ConfigError("binarize threshold must be in [0,255]");
  Tensor out(alpha.shape());
  for (std::size_t i = 0; i < alpha.numel(); ++i) out[i] = (alpha[i] * 255.0 >= threshold_255) ? 1.0 : 0.0;
  return out;
}

bool is_binary(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

}  // namespace memprop

// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Predictions are Vars, targets plain Tensors; all
// image tensors are [N,C,H,W].
#pragma once

#include <array>
#include <vector>

#include "memprop/autograd.hpp"
#include "memprop/core_types.hpp"

namespace memprop::losses {

struct LossWeights {
  double lap = 5.0;
  double tc = 1.0;
  double boundary = 1.5;
  double core = 1.0;
  void validate() const;
};

struct DdcConfig {
  int window = 11;
  int neighbors = 5;
  int fb_topk = 5;
  std::array<double, 3> luminance{0.299, 0.587, 0.114};
  double min_contrast = 1e-3;  ///< floor on the estimated |F - B|
  void validate() const;
};

struct DdcDiagnostics {
  bool empty_band = false;
  int band_pixels = 0;
};

inline constexpr int kPyramidLevels = 5;

Var l1(const Var& pred, const Tensor& gt);

/// Needs min(H, W) >= 32 for five levels.
Var laplacian_pyramid(const Var& pred, const Tensor& gt);
/// Level weights 2^(s-1)/5, s = 1..5.
std::array<double, kPyramidLevels> laplacian_level_weights();

/// Mean over pairs of the per-pixel squared difference of frame deltas.
/// preds/gts are per-frame tensors in temporal order (T >= 2).
Var temporal_coherence(const std::vector<Var>& preds, const std::vector<Tensor>& gts);

/// Binary cross-entropy on logits, averaged over elements.
Var bce_with_logits(const Var& logits, const Tensor& gt);
/// 1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1), per sample, averaged.
Var dice(const Var& logits, const Tensor& gt);
/// bce_with_logits + dice. gt must be binary.
Var segmentation(const Var& logits, const Tensor& gt);
/// Change-head supervision at token resolution.
Var change_mask(const Var& logits, const Tensor& gt);

/// Boundary-band DDC terms. band: [N,1,H,W] binary; image: [N,C,H,W].
/// An empty band yields 0 and sets diagnostics->empty_band.
Var ddc_original(const Var& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg = {},
                 DdcDiagnostics* diagnostics = nullptr);
Var ddc_scaled(const Var& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg = {},
               DdcDiagnostics* diagnostics = nullptr);

/// Per-band-pixel |F - B| estimate used by ddc_scaled (before flooring),
/// in band scan order.
std::vector<double> estimate_contrast(const Tensor& image, const Tensor& band, const DdcConfig& cfg = {});

/// w_core * L1 over core pixels + w_boundary * ddc_scaled over the band.
Var core_supervision(const Var& alpha, const Tensor& seg_gt, const Tensor& image, const RegionPartition& partition,
                     const LossWeights& weights = {}, const DdcConfig& cfg = {});

/// L1 + w_lap * Laplacian averaged over frames, plus w_tc * temporal coherence.
Var matting(const std::vector<Var>& preds, const std::vector<Tensor>& gts, const LossWeights& weights = {});

}  // namespace memprop::losses

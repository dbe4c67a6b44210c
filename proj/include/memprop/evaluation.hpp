// SPDX-License-Identifier: Apache-2.0
//
// Matting metrics. Frames are [1,1,H,W], sequences [T,1,H,W]. Reported
// scales: MAD, MSE, Grad, Conn x1e3; dtSSD x1e2.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "memprop/core_types.hpp"
#include "memprop/manifest.hpp"

namespace memprop::metrics {

inline constexpr double kGradSigma = 1.4;
inline constexpr double kConnStep = 0.1;

/// Mean |pred - gt| x1e3 over every element (frame or sequence).
double mad(const Tensor& pred, const Tensor& gt);
/// Mean (pred - gt)^2 x1e3.
double mse(const Tensor& pred, const Tensor& gt);

/// Normalized Gaussian-derivative kernel along x (rows index y).
std::vector<std::vector<double>> gaussian_derivative_kernel(double sigma);

/// Sum of squared gradient-magnitude differences x1e3 / pixels.
/// Sequences are averaged per frame.
double grad(const Tensor& pred, const Tensor& gt, double sigma = kGradSigma);

/// Connectivity error x1e3 / pixels, thresholds step, 2*step, ..., 1 - step.
/// Sequences are averaged per frame.
double conn(const Tensor& pred, const Tensor& gt, double step = kConnStep);

/// Mean over pairs of sqrt(mean((dM - dGT)^2)) x1e2. Needs T >= 2.
double dtssd(const Tensor& pred_seq, const Tensor& gt_seq);

struct CoreMetrics {
  bool valid = false;  // false when some frame has no core pixels
  double mad = 0.0;
  double mse = 0.0;
  double dtssd = 0.0;
};

/// Metrics restricted to core_fg + core_bg of trimap_from_segmask(seg, kernel),
/// with the segmentation mask standing in for the ground-truth alpha.
CoreMetrics core_region_metrics(const Tensor& pred_seq, const Tensor& seg_seq, int kernel);

struct ReportRow {
  std::string clip_id;
  bool ok = false;
  std::string error;
  double mad = 0, mse = 0, grad = 0, conn = 0, dtssd = 0;
  double core_mad = 0, core_mse = 0, core_dtssd = 0;
  bool core_valid = false;
};

struct Report {
  std::vector<ReportRow> rows;  // per clip, manifest order
  ReportRow aggregate;          // clip_id "ALL", unweighted mean of ok rows
  bool all_ok() const;
};

/// Metrics for one clip given loaded prediction and ground truth.
ReportRow evaluate_clip(const std::string& clip_id, const Tensor& pred, const Tensor& gt_alpha, const Tensor& seg, int core_kernel);

/// Predictions are read from pred_dir/<clip_id>/%05d.png. Only clips with
/// the given split are evaluated when `split` is set.
Report benchmark_report(const Manifest& manifest, const std::filesystem::path& pred_dir, int core_kernel,
                        std::optional<Split> split = std::nullopt);

Report aggregate_rows(std::vector<ReportRow> rows);

void write_report_csv(const Report& report, std::ostream& os);
void write_report_csv(const Report& report, const std::filesystem::path& path);

}  // namespace memprop::metrics

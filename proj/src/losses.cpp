// SPDX-License-Identifier: Apache-2.0
#include "memprop/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace memprop::losses {

void LossWeights::validate() const {
  for (double w : {lap, tc, boundary, core}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

void DdcConfig::validate() const {
  if (window < 3 || window % 2 == 0) throw ConfigError("ddc.window must be odd and >= 3");
  if (neighbors < 1 || neighbors >= window * window - 1) throw ConfigError("ddc.neighbors must be in [1, window^2 - 1)");
  if (fb_topk < 1 || fb_topk > window * window) throw ConfigError("ddc.fb_topk must be in [1, window^2]");
  if (!(min_contrast > 0.0)) throw ConfigError("ddc.min_contrast must be > 0");
}

namespace {

double sgn(double v) { return (v > 0.0) - (v < 0.0); }

// sum(mask * |pred - target|) / count(mask); mask == nullptr means all pixels.
Var masked_mean_abs(const Var& pred, const Tensor& target, const Tensor* mask) {
  require_same_shape(pred.value(), target, "l1");
  if (mask) require_same_shape(pred.value(), *mask, "l1 mask");
  const std::size_t n = target.numel();
  double count = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mask ? (*mask)[i] : 1.0;
    count += m;
    total += m * std::abs(pred.value()[i] - target[i]);
  }
  if (count == 0.0) throw InputError("l1: no pixels selected");
  Tensor out({1});
  out[0] = total / count;
  return make_var(std::move(out), {pred}, [target, mask_copy = mask ? *mask : Tensor(), count](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    const Tensor& p = self.inputs[0]->value;
    const double go = self.grad[0] / count;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double m = mask_copy.empty() ? 1.0 : mask_copy[i];
      g[i] += go * m * sgn(p[i] - target[i]);
    }
  });
}

Var mean_abs(const Var& x) { return masked_mean_abs(x, Tensor::zeros(x.shape()), nullptr); }

void require_binary(const Tensor& t, const char* what) {
  if (!is_binary(t)) throw InputError(std::string(what) + ": ground truth must be binary");
}

struct DdcPlan {
  std::vector<std::size_t> center;             // alpha index of each band pixel
  std::vector<std::vector<std::size_t>> nbrs;  // alpha indices of its neighbors
  std::vector<std::vector<double>> dist;       // color distances to them
  std::vector<double> contrast;                // raw |F - B| estimate
};

double luminance(const Tensor& image, int n, int y, int x, const DdcConfig& cfg) {
  if (image.dim(1) == 1) return image.at(n, 0, y, x);
  double l = 0.0;
  for (int c = 0; c < 3; ++c) l += cfg.luminance[static_cast<std::size_t>(c)] * image.at(n, c, y, x);
  return l;
}

DdcPlan plan_ddc(const Tensor& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg, bool want_contrast) {
  cfg.validate();
  if (alpha.rank() != 4 || alpha.dim(1) != 1) throw ShapeError("ddc: alpha must be [N,1,H,W]");
  require_same_shape(alpha, band, "ddc band");
  if (image.rank() != 4 || image.dim(0) != alpha.dim(0) || image.dim(2) != alpha.dim(2) || image.dim(3) != alpha.dim(3)) {
    throw ShapeError("ddc: image " + shape_str(image.shape()) + " does not match alpha " + shape_str(alpha.shape()));
  }
  const int channels = image.dim(1);
  if (channels != 1 && channels != 3) throw ShapeError("ddc: image must have 1 or 3 channels");
  const int nb = alpha.dim(0), h = alpha.dim(2), w = alpha.dim(3);
  const int r = cfg.window / 2;

  DdcPlan plan;
  std::vector<std::pair<double, std::size_t>> cand;
  std::vector<std::pair<double, int>> lum;
  for (int n = 0; n < nb; ++n) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (band.at(n, 0, y, x) == 0.0) continue;
        const std::size_t ci = (static_cast<std::size_t>(n) * h + y) * w + x;
        cand.clear();
        lum.clear();
        const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
        const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
        for (int yy = y0; yy <= y1; ++yy) {
          for (int xx = x0; xx <= x1; ++xx) {
            if (want_contrast) lum.emplace_back(luminance(image, n, yy, xx, cfg), (yy - y0) * (x1 - x0 + 1) + (xx - x0));
            if (yy == y && xx == x) continue;
            double d2 = 0.0;
            for (int c = 0; c < channels; ++c) {
              const double d = image.at(n, c, y, x) - image.at(n, c, yy, xx);
              d2 += d * d;
            }
            cand.emplace_back(std::sqrt(d2), (static_cast<std::size_t>(n) * h + yy) * w + xx);
          }
        }
        const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.neighbors), cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        plan.center.push_back(ci);
        auto& nb_idx = plan.nbrs.emplace_back();
        auto& nb_d = plan.dist.emplace_back();
        for (std::size_t i = 0; i < k; ++i) {
          nb_d.push_back(cand[i].first);
          nb_idx.push_back(cand[i].second);
        }
        if (want_contrast) {
          std::sort(lum.begin(), lum.end());
          const int ww = x1 - x0 + 1;
          const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(cfg.fb_topk), lum.size());
          std::vector<double> f(static_cast<std::size_t>(channels), 0.0), b(static_cast<std::size_t>(channels), 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            const auto& lo = lum[i];
            const auto& hi = lum[lum.size() - 1 - i];
            for (int c = 0; c < channels; ++c) {
              b[static_cast<std::size_t>(c)] += image.at(n, c, y0 + lo.second / ww, x0 + lo.second % ww);
              f[static_cast<std::size_t>(c)] += image.at(n, c, y0 + hi.second / ww, x0 + hi.second % ww);
            }
          }
          double d2 = 0.0;
          for (int c = 0; c < channels; ++c) {
            const double d = (f[static_cast<std::size_t>(c)] - b[static_cast<std::size_t>(c)]) / static_cast<double>(m);
            d2 += d * d;
          }
          plan.contrast.push_back(std::sqrt(d2));
        }
      }
    }
  }
  return plan;
}

Var ddc_impl(const Var& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg, bool scaled,
             DdcDiagnostics* diag) {
  DdcPlan plan = plan_ddc(alpha.value(), image, band, cfg, scaled);
  const std::size_t nb = plan.center.size();
  if (diag) {
    diag->empty_band = nb == 0;
    diag->band_pixels = static_cast<int>(nb);
  }
  Tensor out({1});
  if (nb == 0) return make_var(std::move(out), {alpha}, [](Node&) {});
  std::vector<double> s(nb, 1.0);
  if (scaled) {
    for (std::size_t i = 0; i < nb; ++i) s[i] = std::max(plan.contrast[i], cfg.min_contrast);
  }
  const Tensor& a = alpha.value();
  double total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t j = 0; j < plan.nbrs[i].size(); ++j) {
      total += std::abs(s[i] * std::abs(a[plan.center[i]] - a[plan.nbrs[i][j]]) - plan.dist[i][j]);
    }
  }
  out[0] = total / static_cast<double>(nb);
  return make_var(std::move(out), {alpha}, [plan = std::move(plan), s = std::move(s), nb](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    const Tensor& a = self.inputs[0]->value;
    const double go = self.grad[0] / static_cast<double>(nb);
    for (std::size_t i = 0; i < nb; ++i) {
      for (std::size_t j = 0; j < plan.nbrs[i].size(); ++j) {
        const std::size_t ci = plan.center[i], cj = plan.nbrs[i][j];
        const double da = a[ci] - a[cj];
        const double rr = s[i] * std::abs(da) - plan.dist[i][j];
        const double gr = go * sgn(rr) * s[i] * sgn(da);
        g[ci] += gr;
        g[cj] -= gr;
      }
    }
  });
}

}  // namespace

Var l1(const Var& pred, const Tensor& gt) { return masked_mean_abs(pred, gt, nullptr); }

std::array<double, kPyramidLevels> laplacian_level_weights() {
  std::array<double, kPyramidLevels> w{};
  for (int s = 0; s < kPyramidLevels; ++s) w[static_cast<std::size_t>(s)] = std::ldexp(1.0, s) / kPyramidLevels;
  return w;
}

Var laplacian_pyramid(const Var& pred, const Tensor& gt) {
  require_same_shape(pred.value(), gt, "laplacian_pyramid");
  if (pred.value().rank() != 4) throw ShapeError("laplacian_pyramid expects [N,C,H,W]");
  if (std::min(pred.dim(2), pred.dim(3)) < (1 << kPyramidLevels)) {
    throw ShapeError("laplacian_pyramid: image " + shape_str(pred.shape()) + " too small for 5 levels (need >= 32)");
  }
  // The pyramid is linear, so L(pred) - L(gt) = L(pred - gt).
  Var cur = ag::sub(pred, ag::constant(gt));
  const auto weights = laplacian_level_weights();
  std::vector<Var> terms;
  for (int s = 0; s < kPyramidLevels; ++s) {
    cur = ag::crop_even(cur);
    Var down = ag::subsample2(ag::blur5_reflect(cur));
    Var up = ag::blur5_reflect(ag::zero_upsample2(down));
    terms.push_back(ag::scale(mean_abs(ag::sub(cur, up)), weights[static_cast<std::size_t>(s)]));
    cur = down;
  }
  return ag::add_all(terms);
}

Var temporal_coherence(const std::vector<Var>& preds, const std::vector<Tensor>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("temporal_coherence: sequence lengths differ");
  if (preds.size() < 2) throw InputError("temporal_coherence needs T >= 2");
  std::vector<Var> terms;
  for (std::size_t t = 1; t < preds.size(); ++t) {
    require_same_shape(preds[t].value(), gts[t], "temporal_coherence");
    Tensor dg = gts[t];
    for (std::size_t i = 0; i < dg.numel(); ++i) dg[i] -= gts[t - 1][i];
    Var d = ag::sub(ag::sub(preds[t], preds[t - 1]), ag::constant(std::move(dg)));
    terms.push_back(ag::mean(ag::mul(d, d)));
  }
  return ag::scale(ag::add_all(terms), 1.0 / static_cast<double>(terms.size()));
}

Var bce_with_logits(const Var& logits, const Tensor& gt) {
  require_same_shape(logits.value(), gt, "bce_with_logits");
  const Tensor& x = logits.value();
  const std::size_t n = x.numel();
  if (n == 0) throw ShapeError("bce_with_logits: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(x[i], 0.0) - x[i] * gt[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  Tensor out({1});
  out[0] = total / static_cast<double>(n);
  return make_var(std::move(out), {logits}, [gt, n](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    const Tensor& x = self.inputs[0]->value;
    const double go = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += go * (1.0 / (1.0 + std::exp(-x[i])) - gt[i]);
  });
}

Var dice(const Var& logits, const Tensor& gt) {
  require_same_shape(logits.value(), gt, "dice");
  const Tensor& x = logits.value();
  const int batch = x.dim(0);
  const std::size_t per = x.numel() / static_cast<std::size_t>(batch);
  std::vector<double> inter(static_cast<std::size_t>(batch)), denom(static_cast<std::size_t>(batch));
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    double pg = 0.0, ps = 0.0, gs = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-x[i]));
      pg += p * gt[i];
      ps += p;
      gs += gt[i];
    }
    inter[static_cast<std::size_t>(b)] = 2.0 * pg + 1.0;
    denom[static_cast<std::size_t>(b)] = ps + gs + 1.0;
    total += 1.0 - inter[static_cast<std::size_t>(b)] / denom[static_cast<std::size_t>(b)];
  }
  Tensor out({1});
  out[0] = total / batch;
  return make_var(std::move(out), {logits}, [gt, inter, denom, batch, per](Node& self) {
    Tensor& g = grad_buffer(*self.inputs[0]);
    const Tensor& x = self.inputs[0]->value;
    const double go = self.grad[0] / batch;
    for (int b = 0; b < batch; ++b) {
      const double num = inter[static_cast<std::size_t>(b)], den = denom[static_cast<std::size_t>(b)];
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-x[i]));
        const double dp = -(2.0 * gt[i] * den - num) / (den * den);
        g[i] += go * dp * p * (1.0 - p);
      }
    }
  });
}

Var segmentation(const Var& logits, const Tensor& gt) {
  require_binary(gt, "segmentation loss");
  return ag::add(bce_with_logits(logits, gt), dice(logits, gt));
}

Var change_mask(const Var& logits, const Tensor& gt) {
  require_binary(gt, "change-mask loss");
  return bce_with_logits(logits, gt);
}

Var ddc_original(const Var& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg,
                 DdcDiagnostics* diagnostics) {
  return ddc_impl(alpha, image, band, cfg, false, diagnostics);
}

Var ddc_scaled(const Var& alpha, const Tensor& image, const Tensor& band, const DdcConfig& cfg,
               DdcDiagnostics* diagnostics) {
  return ddc_impl(alpha, image, band, cfg, true, diagnostics);
}

std::vector<double> estimate_contrast(const Tensor& image, const Tensor& band, const DdcConfig& cfg) {
  Tensor alpha({band.dim(0), 1, band.dim(2), band.dim(3)});
  return plan_ddc(alpha, image, band, cfg, true).contrast;
}

Var core_supervision(const Var& alpha, const Tensor& seg_gt, const Tensor& image, const RegionPartition& partition,
                     const LossWeights& weights, const DdcConfig& cfg) {
  weights.validate();
  require_binary(seg_gt, "core supervision");
  if (!partition.is_valid()) throw InputError("core supervision: invalid region partition");
  const Tensor core = partition.core();
  if (core.sum() == 0.0) throw InputError("core supervision: partition has no core pixels");
  Var l_core = masked_mean_abs(alpha, seg_gt, &core);
  Var l_boundary = ddc_scaled(alpha, image, partition.boundary, cfg);
  return ag::add(ag::scale(l_core, weights.core), ag::scale(l_boundary, weights.boundary));
}

Var matting(const std::vector<Var>& preds, const std::vector<Tensor>& gts, const LossWeights& weights) {
  weights.validate();
  if (preds.empty() || preds.size() != gts.size()) throw ShapeError("matting loss: sequence lengths differ or empty");
  std::vector<Var> terms;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    terms.push_back(l1(preds[t], gts[t]));
    terms.push_back(ag::scale(laplacian_pyramid(preds[t], gts[t]), weights.lap));
  }
  Var per_frame = ag::scale(ag::add_all(terms), 1.0 / static_cast<double>(preds.size()));
  if (preds.size() < 2 || weights.tc == 0.0) return per_frame;
  return ag::add(per_frame, ag::scale(temporal_coherence(preds, gts), weights.tc));
}

}  // namespace memprop::losses

// SPDX-License-Identifier: Apache-2.0
#include "memprop/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "memprop/image_io.hpp"

namespace memprop::metrics {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  require_same_shape(a, b, what);
  if (a.rank() != 4 || a.dim(1) != 1) throw ShapeError(std::string(what) + ": expected [T,1,H,W]");
  if (a.numel() == 0) throw ShapeError(std::string(what) + ": empty input");
}

template <typename F>
double per_frame_mean(const Tensor& pred, const Tensor& gt, F&& fn) {
  double total = 0.0;
  for (int t = 0; t < pred.dim(0); ++t) total += fn(pred.slice0(t), gt.slice0(t));
  return total / pred.dim(0);
}

// Replicate-border 2-D convolution of an HxW plane.
std::vector<double> convolve(const Tensor& img, const std::vector<std::vector<double>>& k) {
  const int h = img.dim(2), w = img.dim(3);
  const int hs = static_cast<int>(k.size()) / 2;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -hs; i <= hs; ++i) {
        for (int j = -hs; j <= hs; ++j) {
          const int sy = std::clamp(y - i, 0, h - 1), sx = std::clamp(x - j, 0, w - 1);
          acc += k[static_cast<std::size_t>(i + hs)][static_cast<std::size_t>(j + hs)] * img.at(0, 0, sy, sx);
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  return out;
}

std::vector<double> gradient_magnitude(const Tensor& img, const std::vector<std::vector<double>>& hx) {
  const std::size_t n = hx.size();
  std::vector<std::vector<double>> hy(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) hy[i][j] = hx[j][i];
  const auto gx = convolve(img, hx);
  const auto gy = convolve(img, hy);
  std::vector<double> mag(gx.size());
  for (std::size_t i = 0; i < gx.size(); ++i) mag[i] = std::hypot(gx[i], gy[i]);
  return mag;
}

double grad_frame(const Tensor& pred, const Tensor& gt, const std::vector<std::vector<double>>& k) {
  const auto mp = gradient_magnitude(pred, k);
  const auto mg = gradient_magnitude(gt, k);
  double s = 0.0;
  for (std::size_t i = 0; i < mp.size(); ++i) s += (mp[i] - mg[i]) * (mp[i] - mg[i]);
  return s * 1e3 / static_cast<double>(mp.size());
}

// Marks the largest 4-connected component of `on` (first found wins ties).
std::vector<char> largest_component(const std::vector<char>& on, int h, int w) {
  std::vector<int> label(on.size(), -1);
  std::vector<int> sizes;
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    if (!on[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    int size = 0;
    stack.push_back(start);
    label[static_cast<std::size_t>(start)] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int y = p / w, x = p % w;
      const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nbr) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const auto qi = static_cast<std::size_t>(q[0] * w + q[1]);
        if (on[qi] && label[qi] < 0) {
          label[qi] = id;
          stack.push_back(static_cast<int>(qi));
        }
      }
    }
    sizes.push_back(size);
  }
  std::vector<char> out(on.size(), 0);
  if (sizes.empty()) return out;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = label[i] == best;
  return out;
}

double conn_frame(const Tensor& pred, const Tensor& gt, double step) {
  const int h = pred.dim(2), w = pred.dim(3);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const int levels = static_cast<int>(std::lround(1.0 / step)) - 1;
  std::vector<double> l(n, -1.0);
  std::vector<char> both(n);
  for (int i = 1; i <= levels; ++i) {
    // i / (levels + 1) rather than i * step so that thresholds are the
    // correctly rounded decimals 0.1, 0.2, ...
    const double th = static_cast<double>(i) / (levels + 1);
    for (std::size_t p = 0; p < n; ++p) both[p] = pred[p] >= th && gt[p] >= th;
    const auto omega = largest_component(both, h, w);
    for (std::size_t p = 0; p < n; ++p) {
      if (l[p] == -1.0 && !omega[p]) l[p] = static_cast<double>(i - 1) / (levels + 1);
    }
  }
  double s = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    if (l[p] == -1.0) l[p] = 1.0;
    const double dp = pred[p] - l[p], dg = gt[p] - l[p];
    const double phi_p = 1.0 - dp * (dp >= 0.15 ? 1.0 : 0.0);
    const double phi_g = 1.0 - dg * (dg >= 0.15 ? 1.0 : 0.0);
    s += std::abs(phi_p - phi_g);
  }
  return s * 1e3 / static_cast<double>(n);
}

}  // namespace

double mad(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "mad");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.numel()) * 1e3;
}

double mse(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  return s / static_cast<double>(pred.numel()) * 1e3;
}

std::vector<std::vector<double>> gaussian_derivative_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("grad: sigma must be > 0");
  const double eps = 1e-2;
  const int hs = static_cast<int>(std::ceil(sigma * std::sqrt(-2.0 * std::log(std::sqrt(2.0 * std::numbers::pi) * sigma * eps))));
  const int size = 2 * hs + 1;
  auto gauss = [sigma](double x) { return std::exp(-x * x / (2 * sigma * sigma)) / (sigma * std::sqrt(2 * std::numbers::pi)); };
  std::vector<std::vector<double>> k(static_cast<std::size_t>(size), std::vector<double>(static_cast<std::size_t>(size)));
  double norm = 0.0;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      const double u = i - hs, v = j - hs;
      const double val = gauss(u) * (-v * gauss(v) / (sigma * sigma));
      k[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = val;
      norm += val * val;
    }
  }
  norm = std::sqrt(norm);
  for (auto& row : k)
    for (double& v : row) v /= norm;
  return k;
}

double grad(const Tensor& pred, const Tensor& gt, double sigma) {
  check_pair(pred, gt, "grad");
  const auto k = gaussian_derivative_kernel(sigma);
  return per_frame_mean(pred, gt, [&](const Tensor& p, const Tensor& g) { return grad_frame(p, g, k); });
}

double conn(const Tensor& pred, const Tensor& gt, double step) {
  check_pair(pred, gt, "conn");
  if (!(step > 0.0 && step < 1.0)) throw ConfigError("conn: step must be in (0,1)");
  return per_frame_mean(pred, gt, [&](const Tensor& p, const Tensor& g) { return conn_frame(p, g, step); });
}

double dtssd(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "dtssd");
  const int t_count = pred.dim(0);
  if (t_count < 2) throw InputError("dtssd needs T >= 2");
  const std::size_t per = pred.numel() / static_cast<std::size_t>(t_count);
  double total = 0.0;
  for (int t = 1; t < t_count; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t a = t * per + i, b = (t - 1) * per + i;
      const double d = (pred[a] - pred[b]) - (gt[a] - gt[b]);
      s += d * d;
    }
    total += std::sqrt(s / static_cast<double>(per));
  }
  return total / (t_count - 1) * 1e2;
}

CoreMetrics core_region_metrics(const Tensor& pred, const Tensor& seg, int kernel) {
  check_pair(pred, seg, "core_region_metrics");
  if (!is_binary(seg)) throw InputError("core_region_metrics: segmentation must be binary");
  const int t_count = pred.dim(0);
  const std::size_t per = pred.numel() / static_cast<std::size_t>(t_count);
  std::vector<Tensor> cores;
  CoreMetrics m;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int t = 0; t < t_count; ++t) {
    cores.push_back(trimap_from_segmask(seg.slice0(t), kernel).core());
    if (cores.back().sum() == 0.0) return {false, nan, nan, nan};
  }
  double mad_sum = 0.0, mse_sum = 0.0;
  for (int t = 0; t < t_count; ++t) {
    double a = 0.0, b = 0.0, n = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      if (cores[static_cast<std::size_t>(t)][i] == 0.0) continue;
      const double d = pred[t * per + i] - seg[t * per + i];
      a += std::abs(d);
      b += d * d;
      n += 1.0;
    }
    mad_sum += a / n;
    mse_sum += b / n;
  }
  m.mad = mad_sum / t_count * 1e3;
  m.mse = mse_sum / t_count * 1e3;
  if (t_count >= 2) {
    double total = 0.0;
    int pairs = 0;
    for (int t = 1; t < t_count; ++t) {
      double s = 0.0, n = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        if (cores[static_cast<std::size_t>(t)][i] == 0.0 || cores[static_cast<std::size_t>(t - 1)][i] == 0.0) continue;
        const std::size_t a = t * per + i, b = (t - 1) * per + i;
        const double d = (pred[a] - pred[b]) - (seg[a] - seg[b]);
        s += d * d;
        n += 1.0;
      }
      if (n == 0.0) continue;
      total += std::sqrt(s / n);
      ++pairs;
    }
    m.dtssd = pairs ? total / pairs * 1e2 : nan;
  } else {
    m.dtssd = nan;
  }
  m.valid = true;
  return m;
}

bool Report::all_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.ok; });
}

ReportRow evaluate_clip(const std::string& clip_id, const Tensor& pred, const Tensor& gt, const Tensor& seg, int core_kernel) {
  ReportRow r;
  r.clip_id = clip_id;
  r.mad = mad(pred, gt);
  r.mse = mse(pred, gt);
  r.grad = grad(pred, gt);
  r.conn = conn(pred, gt);
  r.dtssd = pred.dim(0) >= 2 ? dtssd(pred, gt) : std::numeric_limits<double>::quiet_NaN();
  const CoreMetrics c = core_region_metrics(pred, seg, core_kernel);
  r.core_valid = c.valid;
  r.core_mad = c.mad;
  r.core_mse = c.mse;
  r.core_dtssd = c.dtssd;
  r.ok = true;
  return r;
}

Report aggregate_rows(std::vector<ReportRow> rows) {
  Report rep;
  rep.rows = std::move(rows);
  ReportRow& a = rep.aggregate;
  a.clip_id = "ALL";
  int n = 0, nc = 0;
  for (const auto& r : rep.rows) {
    if (!r.ok) continue;
    ++n;
    a.mad += r.mad;
    a.mse += r.mse;
    a.grad += r.grad;
    a.conn += r.conn;
    a.dtssd += r.dtssd;
    if (r.core_valid) {
      ++nc;
      a.core_mad += r.core_mad;
      a.core_mse += r.core_mse;
      a.core_dtssd += r.core_dtssd;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  a.ok = n > 0;
  if (!a.ok) a.error = "no clip evaluated";
  for (double* v : {&a.mad, &a.mse, &a.grad, &a.conn, &a.dtssd}) *v = n ? *v / n : nan;
  a.core_valid = nc > 0;
  for (double* v : {&a.core_mad, &a.core_mse, &a.core_dtssd}) *v = nc ? *v / nc : nan;
  return rep;
}

Report benchmark_report(const Manifest& manifest, const std::filesystem::path& pred_dir, int core_kernel,
                        std::optional<Split> split) {
  std::vector<ReportRow> rows;
  for (const ClipManifest* c : manifest.select(split, std::nullopt)) {
    try {
      const LoadedClip clip = load_clip(manifest, *c);
      const std::filesystem::path dir = pred_dir / c->clip_id;
      if (!std::filesystem::is_directory(dir)) throw InputError("missing predictions for clip " + c->clip_id);
      const int found = count_frames(dir);
      if (found != c->frame_count) {
        throw InputError("clip " + c->clip_id + ": " + std::to_string(found) + " predicted frames, expected " +
                         std::to_string(c->frame_count));
      }
      Tensor pred = read_sequence(dir, c->frame_count);
      if (pred.dim(1) != 1) throw InputError("clip " + c->clip_id + ": predictions must be single-channel");
      const Tensor& gt = clip.alpha ? clip.alpha->alpha : clip.mask.mask;
      rows.push_back(evaluate_clip(c->clip_id, pred, gt, clip.mask.mask, core_kernel));
    } catch (const std::exception& e) {
      ReportRow r;
      r.clip_id = c->clip_id;
      r.error = e.what();
      rows.push_back(std::move(r));
    }
  }
  return aggregate_rows(std::move(rows));
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_row(std::ostream& os, const ReportRow& r) {
  os << r.clip_id;
  if (!r.ok) {
    for (int i = 0; i < 8; ++i) os << ",";
    os << ",error: " << csv_escape(r.error) << "\n";
    return;
  }
  os << ',' << num(r.mad) << ',' << num(r.mse) << ',' << num(r.grad) << ',' << num(r.conn) << ',' << num(r.dtssd);
  if (r.core_valid) {
    os << ',' << num(r.core_mad) << ',' << num(r.core_mse) << ',' << num(r.core_dtssd) << ",ok\n";
  } else {
    os << ",nan,nan,nan,ok (empty core)\n";
  }
}

}  // namespace

void write_report_csv(const Report& report, std::ostream& os) {
  os << "clip_id,mad,mse,grad,conn,dtssd,core_mad,core_mse,core_dtssd,status\n";
  for (const auto& r : report.rows) write_row(os, r);
  write_row(os, report.aggregate);
}

void write_report_csv(const Report& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write report " + path.string());
  write_report_csv(report, os);
}

}  // namespace memprop::metrics

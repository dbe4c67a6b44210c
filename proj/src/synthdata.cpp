// SPDX-License-Identifier: Apache-2.0
#include "memprop/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "memprop/image_io.hpp"

namespace memprop::synth {

namespace fs = std::filesystem;
using nlohmann::json;

double Primitive::signed_distance(double px, double py, int t) const {
  const double s = 1.0 + scale_rate * t;
  const double ccx = cx + vx * t + amp_x * std::sin(omega * t + phase);
  const double ccy = cy + vy * t + amp_y * std::sin(omega * t + phase + 0.5 * std::numbers::pi);
  const double dx = px - ccx, dy = py - ccy;
  if (kind == Kind::Disk) return std::hypot(dx, dy) - rx * s;
  const double th = rotation + spin * t;
  const double lx = std::cos(th) * dx + std::sin(th) * dy;
  const double ly = -std::sin(th) * dx + std::cos(th) * dy;
  const double hx = rx * s, hy = ry * s;
  const double c = std::min(corner * s, std::min(hx, hy));
  const double qx = std::abs(lx) - (hx - c), qy = std::abs(ly) - (hy - c);
  return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0) - c;
}

std::array<double, 4> Primitive::bounds(int t) const {
  const double s = 1.0 + scale_rate * t;
  const double ccx = cx + vx * t + amp_x * std::sin(omega * t + phase);
  const double ccy = cy + vy * t + amp_y * std::sin(omega * t + phase + 0.5 * std::numbers::pi);
  const double r = kind == Kind::Disk ? rx * s : std::hypot(rx, ry) * s;
  return {ccx - r, ccy - r, ccx + r, ccy + r};
}

void SceneSpec::validate() const {
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("scene: height and width must be positive multiples of 16");
  }
  if (foreground.empty()) throw ConfigError("scene.foreground: at least one target primitive required");
  if (!(soft_edge >= 0.0)) throw ConfigError("scene.soft_edge must be >= 0");
  for (const auto* list : {&foreground, &distractors}) {
    for (const auto& p : *list) {
      if (!(p.rx > 0.0) || !(p.ry > 0.0) || p.corner < 0.0) throw ConfigError("scene: primitive sizes must be positive");
      for (double c : p.color)
        if (c < 0.0 || c > 1.0) throw ConfigError("scene: primitive color outside [0,1]");
    }
  }
  for (int c = 0; c < 3; ++c) {
    const double lo = background.base[c] - background.amplitude[c], hi = background.base[c] + background.amplitude[c];
    if (lo < 0.0 || hi > 1.0 || background.amplitude[c] < 0.0) throw ConfigError("scene.background: texture leaves [0,1]");
  }
}

double edge_coverage(double sd, double e) {
  if (e <= 0.0) return sd <= 0.0 ? 1.0 : 0.0;
  return std::clamp(0.5 - sd / e, 0.0, 1.0);
}

RenderedClip render_clip(const SceneSpec& spec, int frames) {
  spec.validate();
  if (frames < 1) throw InputError("render_clip: T must be >= 1");
  const int h = spec.height, w = spec.width;
  for (int t = 0; t < frames; ++t) {
    for (const auto& p : spec.foreground) {
      const auto b = p.bounds(t);
      if (b[2] < 0.0 || b[3] < 0.0 || b[0] > w || b[1] > h) {
        throw InputError("render_clip: target primitive leaves the canvas at frame " + std::to_string(t));
      }
    }
  }
  RenderedClip out;
  out.foreground = Tensor({frames, 3, h, w});
  out.background = Tensor({frames, 3, h, w});
  out.alpha.alpha = Tensor({frames, 1, h, w});
  out.clip.frames = Tensor({frames, 3, h, w});
  const auto& bg = spec.background;
  for (int t = 0; t < frames; ++t) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        Color b;
        for (int c = 0; c < 3; ++c) {
          b[c] = bg.base[c] + bg.amplitude[c] * std::sin(bg.freq_x * (px + bg.drift * t) + c) * std::cos(bg.freq_y * py + 0.7 * c);
        }
        for (const auto& d : spec.distractors) {
          const double a = edge_coverage(d.signed_distance(px, py, t), spec.soft_edge);
          for (int c = 0; c < 3; ++c) b[c] = a * d.color[c] + (1.0 - a) * b[c];
        }
        // Front-to-back "over" of the targets with premultiplied color.
        double acc = 0.0;
        Color fp{0.0, 0.0, 0.0};
        for (const auto& p : spec.foreground) {
          const double a = edge_coverage(p.signed_distance(px, py, t), spec.soft_edge);
          for (int c = 0; c < 3; ++c) fp[c] += (1.0 - acc) * a * p.color[c];
          acc += (1.0 - acc) * a;
        }
        Color f = spec.foreground.front().color;
        if (acc > 0.0)
          for (int c = 0; c < 3; ++c) f[c] = std::clamp(fp[c] / acc, 0.0, 1.0);
        out.alpha.alpha.at(t, 0, y, x) = acc;
        for (int c = 0; c < 3; ++c) {
          out.foreground.at(t, c, y, x) = f[c];
          out.background.at(t, c, y, x) = b[c];
          out.clip.frames.at(t, c, y, x) = acc * f[c] + (1.0 - acc) * b[c];
        }
      }
    }
  }
  out.mask.mask = binarize_alpha(out.alpha.alpha, 128);
  return out;
}

void AugmentationSpec::validate() const {
  for (double p : {reverse_prob, erode_prob, dilate_prob}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probabilities must be in [0,1]");
  }
  if (erode_prob + dilate_prob > 1.0) throw ConfigError("augmentation: erode_prob + dilate_prob must be <= 1");
  if (kernels.empty()) throw ConfigError("augmentation.kernels must not be empty");
  for (int k : kernels)
    if (k < 1 || k % 2 == 0) throw ConfigError("augmentation.kernels must be odd and >= 1");
}

MaskAugmentation draw_mask_augmentation(const AugmentationSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, spec.kernels.size() - 1);
  const double r = u(rng);
  MaskAugmentation a;
  a.kernel = spec.kernels[pick(rng)];
  if (r < spec.erode_prob) a.op = MaskAugmentation::Op::Erode;
  else if (r < spec.erode_prob + spec.dilate_prob) a.op = MaskAugmentation::Op::Dilate;
  else a.op = MaskAugmentation::Op::Identity;
  return a;
}

Tensor apply_mask_augmentation(const Tensor& mask, const MaskAugmentation& aug) {
  switch (aug.op) {
    case MaskAugmentation::Op::Erode: return erode(mask, aug.kernel);
    case MaskAugmentation::Op::Dilate: return dilate(mask, aug.kernel);
    case MaskAugmentation::Op::Identity: break;
  }
  return mask;
}

Tensor augment_given_mask(const Tensor& mask, const AugmentationSpec& spec, Rng& rng) {
  if (!is_binary(mask)) throw InputError("augment_given_mask: mask must be binary");
  return apply_mask_augmentation(mask, draw_mask_augmentation(spec, rng));
}

InstanceSelection select_instances(const std::vector<Tensor>& instances, std::uint64_t seed) {
  if (instances.empty()) throw InputError("select_instances: no instances");
  if (instances.size() > 30) throw InputError("select_instances: too many instances");
  for (const auto& m : instances) {
    require_same_shape(m, instances.front(), "select_instances");
    if (!is_binary(m)) throw InputError("select_instances: instance masks must be binary");
  }
  Rng rng(seed);
  const std::uint64_t full = (std::uint64_t{1} << instances.size()) - 1;
  const std::uint64_t bits = std::uniform_int_distribution<std::uint64_t>(1, full)(rng);
  InstanceSelection s;
  s.target = Tensor::zeros(instances.front().shape());
  s.background = Tensor::zeros(instances.front().shape());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const bool on = (bits >> i) & 1U;
    s.chosen.push_back(on);
    Tensor& dst = on ? s.target : s.background;
    for (std::size_t p = 0; p < dst.numel(); ++p) dst[p] = std::max(dst[p], instances[i][p]);
  }
  for (std::size_t p = 0; p < s.target.numel(); ++p)
    if (s.target[p] > 0.0) s.background[p] = 0.0;
  return s;
}

SequenceWindow sample_training_sequence(int clip_length, int length, int max_interval, Rng& rng, double reverse_prob) {
  if (length < 1) throw ConfigError("sequence length must be >= 1");
  if (max_interval < 1) throw ConfigError("max_interval must be >= 1");
  if (clip_length < length) {
    throw InputError("clip of " + std::to_string(clip_length) + " frames is shorter than the sequence length " +
                     std::to_string(length));
  }
  SequenceWindow win;
  int cap = max_interval;
  if (length > 1) cap = std::min(max_interval, (clip_length - 1) / (length - 1));
  std::uniform_int_distribution<int> gap(1, cap);
  std::vector<int> gaps;
  int span = 0;
  for (int i = 1; i < length; ++i) {
    gaps.push_back(gap(rng));
    span += gaps.back();
  }
  const int start = std::uniform_int_distribution<int>(0, clip_length - 1 - span)(rng);
  win.indices.push_back(start);
  for (int g : gaps) win.indices.push_back(win.indices.back() + g);
  win.reversed = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < reverse_prob;
  return win;
}

SequenceWindow sample_training_sequence(const ClipManifest& clip, int length, int max_interval, std::uint64_t seed) {
  if (length < 3 || length > 8) throw ConfigError("training sequence length must be in [3, 8]");
  Rng rng(seed);
  return sample_training_sequence(clip.frame_count, length, max_interval, rng);
}

namespace {

double sample_bilinear(const Tensor& img, int c, double x, double y) {
  const int h = img.dim(2), w = img.dim(3);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * img.at(0, c, y0, x0) + fx * img.at(0, c, y0, x1)) +
         fy * ((1 - fx) * img.at(0, c, y1, x0) + fx * img.at(0, c, y1, x1));
}

}  // namespace

std::pair<Tensor, Tensor> motion_augment(const Tensor& image, const Tensor& alpha, int length, const MotionRange& range,
                                         Rng& rng) {
  if (image.rank() != 4 || image.dim(0) != 1 || alpha.rank() != 4 || alpha.dim(0) != 1 || alpha.dim(1) != 1 ||
      image.dim(2) != alpha.dim(2) || image.dim(3) != alpha.dim(3)) {
    throw ShapeError("motion_augment expects [1,C,H,W] image and [1,1,H,W] alpha");
  }
  if (length < 1) throw ConfigError("motion_augment: length must be >= 1");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double sx = u(rng) * range.max_shift, sy = u(rng) * range.max_shift;
  const double sc = u(rng) * range.max_scale, rot = u(rng) * range.max_rotation;
  const int c = image.dim(1), h = image.dim(2), w = image.dim(3);
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  Tensor frames({length, c, h, w}), mattes({length, 1, h, w});
  for (int t = 0; t < length; ++t) {
    const double f = length > 1 ? static_cast<double>(t) / (length - 1) : 0.0;
    const double s = 1.0 + f * sc, th = f * rot;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // Inverse similarity: destination pixel -> source location.
        const double dx = x - cx - f * sx, dy = y - cy - f * sy;
        const double srcx = (std::cos(th) * dx + std::sin(th) * dy) / s + cx;
        const double srcy = (-std::sin(th) * dx + std::cos(th) * dy) / s + cy;
        for (int ch = 0; ch < c; ++ch) frames.at(t, ch, y, x) = sample_bilinear(image, ch, srcx, srcy);
        mattes.at(t, 0, y, x) = sample_bilinear(alpha, 0, srcx, srcy);
      }
    }
  }
  return {std::move(frames), std::move(mattes)};
}

void CorpusConfig::validate() const {
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("corpus.height/width: must be positive multiples of 16");
  }
  if (frames < 1) throw ConfigError("corpus.frames: must be >= 1");
  for (int n : {train_matting, train_segmentation, val_matting, test_matting, static_clips}) {
    if (n < 0) throw ConfigError("corpus: clip counts must be >= 0");
  }
  if (static_clips > train_matting) throw ConfigError("corpus.static_clips: exceeds train_matting");
  if (min_soft_edge < 0.0 || max_soft_edge < min_soft_edge) throw ConfigError("corpus.min_soft_edge/max_soft_edge: invalid range");
}

json CorpusConfig::to_json() const {
  return {{"seed", seed},
          {"height", height},
          {"width", width},
          {"frames", frames},
          {"train_matting", train_matting},
          {"train_segmentation", train_segmentation},
          {"val_matting", val_matting},
          {"test_matting", test_matting},
          {"static_clips", static_clips},
          {"min_soft_edge", min_soft_edge},
          {"max_soft_edge", max_soft_edge}};
}

CorpusConfig CorpusConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("corpus: expected an object");
  CorpusConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "height") c.height = it->get<int>();
      else if (k == "width") c.width = it->get<int>();
      else if (k == "frames") c.frames = it->get<int>();
      else if (k == "train_matting") c.train_matting = it->get<int>();
      else if (k == "train_segmentation") c.train_segmentation = it->get<int>();
      else if (k == "val_matting") c.val_matting = it->get<int>();
      else if (k == "test_matting") c.test_matting = it->get<int>();
      else if (k == "static_clips") c.static_clips = it->get<int>();
      else if (k == "min_soft_edge") c.min_soft_edge = it->get<double>();
      else if (k == "max_soft_edge") c.max_soft_edge = it->get<double>();
      else throw ConfigError("corpus." + k + ": unknown field");
    } catch (const json::exception&) {
      throw ConfigError("corpus." + k + ": wrong type");
    }
  }
  c.validate();
  return c;
}

SceneSpec random_scene(const CorpusConfig& cfg, std::uint64_t seed, DataKind kind, bool is_static) {
  Rng rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  SceneSpec s;
  s.seed = seed;
  s.height = cfg.height;
  s.width = cfg.width;
  s.soft_edge = uni(cfg.min_soft_edge, cfg.max_soft_edge);
  if (kind == DataKind::Segmentation) s.soft_edge = uni(0.0, cfg.min_soft_edge);
  const double side = std::min(cfg.height, cfg.width);

  auto make = [&](double size_lo, double size_hi, double cx_lo, double cx_hi, double cy_lo, double cy_hi) {
    Primitive p;
    p.kind = uni(0.0, 1.0) < 0.5 ? Primitive::Kind::Disk : Primitive::Kind::RoundedRect;
    p.rx = uni(size_lo, size_hi) * side;
    p.ry = p.kind == Primitive::Kind::Disk ? p.rx : p.rx * uni(0.7, 1.3);
    p.corner = uni(1.0, 4.0);
    p.rotation = uni(0.0, std::numbers::pi);
    p.cx = uni(cx_lo, cx_hi) * cfg.width;
    p.cy = uni(cy_lo, cy_hi) * cfg.height;
    for (double& c : p.color) c = uni(0.05, 0.95);
    const double amp = uni(0.03, 0.12) * side;
    const double omega = uni(0.15, 0.35);
    const double phase = uni(0.0, 2.0 * std::numbers::pi);
    const double scale_rate = uni(-0.004, 0.004);
    const double spin = p.kind == Primitive::Kind::RoundedRect ? uni(-0.03, 0.03) : 0.0;
    if (!is_static) {
      p.amp_x = amp;
      p.amp_y = amp * uni(0.3, 1.0);
      p.omega = omega;
      p.phase = phase;
      p.scale_rate = scale_rate;
      p.spin = spin;
    }
    return p;
  };

  const int targets = uni(0.0, 1.0) < 0.4 ? 2 : 1;
  for (int i = 0; i < targets; ++i) s.foreground.push_back(make(0.14, 0.24, 0.35, 0.65, 0.35, 0.65));
  if (uni(0.0, 1.0) < 0.5) s.distractors.push_back(make(0.06, 0.1, 0.1, 0.9, 0.1, 0.25));
  for (int c = 0; c < 3; ++c) {
    s.background.base[c] = uni(0.25, 0.75);
    s.background.amplitude[c] = uni(0.05, 0.2);
  }
  s.background.freq_x = uni(0.08, 0.3);
  s.background.freq_y = uni(0.08, 0.3);
  s.background.drift = is_static ? 0.0 : uni(-0.5, 0.5);
  return s;
}

namespace {

std::uint64_t clip_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 step: independent stream per clip
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Manifest generate_corpus(const CorpusConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  Manifest m;
  m.seed = cfg.seed;
  m.root = out_dir;
  m.provenance = {{"generator", "synthdata"}, {"corpus", cfg.to_json()}};
  struct Job {
    Split split;
    DataKind kind;
    int count;
    const char* prefix;
  };
  const Job jobs[] = {{Split::Train, DataKind::Matting, cfg.train_matting, "train_mat"},
                      {Split::Train, DataKind::Segmentation, cfg.train_segmentation, "train_seg"},
                      {Split::Val, DataKind::Matting, cfg.val_matting, "val_mat"},
                      {Split::Test, DataKind::Matting, cfg.test_matting, "test_mat"}};
  std::uint64_t index = 0;
  for (const auto& job : jobs) {
    for (int i = 0; i < job.count; ++i, ++index) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%02d", job.prefix, i);
      const bool is_static = job.split == Split::Train && job.kind == DataKind::Matting && i < cfg.static_clips;
      const SceneSpec scene = random_scene(cfg, clip_seed(cfg.seed, index), job.kind, is_static);
      const RenderedClip r = render_clip(scene, cfg.frames);
      ClipManifest c;
      c.clip_id = id;
      c.split = job.split;
      c.data_kind = job.kind;
      c.frame_count = cfg.frames;
      c.height = cfg.height;
      c.width = cfg.width;
      c.frames_dir = c.clip_id + "/frames";
      write_sequence(out_dir / c.frames_dir, r.clip.frames, 8);
      if (job.kind == DataKind::Matting) {
        c.alpha_dir = c.clip_id + "/alpha";
        write_sequence(out_dir / c.alpha_dir, r.alpha.alpha, 16);
      } else {
        c.mask_dir = c.clip_id + "/mask";
        write_sequence(out_dir / c.mask_dir, r.mask.mask, 8);
      }
      m.clips.push_back(std::move(c));
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace memprop::synth

// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.
//
//   acceptance [--cli <memprop_matte>] [--work <dir>] [--checkpoint <ckpt>] [N ...]
//
// --checkpoint reuses an overfit model instead of training one (criteria
// 7-9); numbers select a subset of criteria.
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "memprop/evaluation.hpp"
#include "memprop/inference.hpp"
#include "memprop/training.hpp"
#include "oracles.hpp"

using namespace memprop;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

std::mt19937_64 rng(20240917);

// ---------------------------------------------------------------- 1, 2

Outcome fusion_endpoints() {
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 3, l = 1 + trial % 17, c = 1 + trial % 9;
    const Var vm = ag::constant(oracle::random_tensor({n, l, c}, rng, -5, 5));
    const Var vp = ag::constant(oracle::random_tensor({n, l, c}, rng, -5, 5));
    const Tensor one = memory::fuse_memory(vm, vp, ag::constant(Tensor({n, l, 1}, 1.0))).value();
    const Tensor zero = memory::fuse_memory(vm, vp, ag::constant(Tensor({n, l, 1}, 0.0))).value();
    for (std::size_t i = 0; i < one.numel(); ++i) {
      worst = std::max({worst, std::fabs(one[i] - vm.value()[i]), std::fabs(zero[i] - vp.value()[i])});
    }
  }
  return {worst == 0.0, fmt("max abs error %g over 200 draws", worst)};
}

Outcome affinity_stochastic() {
  double worst = 0, min_entry = 1;
  std::uniform_real_distribution<double> spread(0.1, 20.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int lq = 1 + trial % 13, lk = 1 + (trial * 7) % 29, ck = 1 + trial % 8;
    const double s = spread(rng);
    const Tensor q = oracle::random_tensor({1, lq, ck}, rng, -s, s), k = oracle::random_tensor({1, lk, ck}, rng, -s, s);
    const Tensor a = memory::compute_affinity(ag::constant(q), ag::constant(k)).value();
    for (int i = 0; i < lq; ++i) {
      double row = 0;
      for (int j = 0; j < lk; ++j) {
        const double v = a[static_cast<std::size_t>(i * lk + j)];
        row += v;
        min_entry = std::min(min_entry, v);
      }
      worst = std::max(worst, std::fabs(row - 1.0));
    }
  }
  return {worst <= 1e-5 && min_entry >= 0.0, fmt("max |row sum - 1| = %.3g, min entry = %.3g", worst, min_entry)};
}

// ---------------------------------------------------------------- 3

Outcome scaled_ddc_zero() {
  std::uniform_real_distribution<double> u(0, 1), frac(0.05, 0.95);
  double worst_scaled = 0, min_original = 1e9, worst_unit = 0;
  int checked_original = 0;
  for (int trial = 0; trial < 50; ++trial) {
    // Fractional band in columns 14..17, pure 0 left, pure 1 right.
    Tensor a({1, 1, 32, 32}), band({1, 1, 32, 32});
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        a.at(0, 0, y, x) = x < 14 ? 0.0 : x > 17 ? 1.0 : frac(rng);
        band.at(0, 0, y, x) = x >= 14 && x <= 17 ? 1.0 : 0.0;
      }
    double f = u(rng), b = u(rng);
    while (std::fabs(f - b) < 0.05) b = u(rng);
    Tensor img(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) img[i] = a[i] * f + (1 - a[i]) * b;
    const double s = losses::ddc_scaled(ag::constant(a), img, band).value()[0];
    const double o = losses::ddc_original(ag::constant(a), img, band).value()[0];
    worst_scaled = std::max(worst_scaled, s);
    if (std::fabs(f - b) <= 0.7) {
      min_original = std::min(min_original, o);
      ++checked_original;
    }
    // F = 1, B = 0: the image is the alpha itself.
    const double s1 = losses::ddc_scaled(ag::constant(a), a, band).value()[0];
    const double o1 = losses::ddc_original(ag::constant(a), a, band).value()[0];
    worst_unit = std::max(worst_unit, std::fabs(s1 - o1));
  }
  const bool pass = worst_scaled <= 1e-6 && min_original >= 1e-3 && worst_unit <= 1e-12;
  return {pass, fmt("max scaled %.3g, min original %.3g (%g cases), max |scaled-original| at F=1,B=0 %.3g", worst_scaled,
                    min_original, static_cast<double>(checked_original), worst_unit)};
}

// ---------------------------------------------------------------- 4

Outcome loss_gradients() {
  using namespace losses;
  std::bernoulli_distribution coin(0.5), sparse(0.3);
  auto binary = [&](Shape s, std::bernoulli_distribution& d) {
    Tensor t(std::move(s));
    for (auto& v : t.storage()) v = d(rng) ? 1.0 : 0.0;
    return t;
  };
  const Tensor p = oracle::random_tensor({2, 1, 16, 16}, rng, 0.02, 0.98);
  const Tensor g = oracle::random_tensor({2, 1, 16, 16}, rng, 0, 1);
  const Tensor gb = binary({2, 1, 16, 16}, coin);
  const Tensor logits = oracle::random_tensor({2, 1, 16, 16}, rng, -3, 3);
  const Tensor img = oracle::random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const Tensor band = binary({2, 1, 16, 16}, sparse);
  Tensor seg1 = gb.slice0(0);
  RegionPartition part = trimap_from_segmask(seg1, 3);
  while (part.core().sum() == 0) {
    seg1 = binary({1, 1, 16, 16}, coin);
    part = trimap_from_segmask(seg1, 3);
  }
  const Tensor seq = oracle::random_tensor({3, 1, 16, 16}, rng, 0, 1);
  const std::vector<Tensor> gseq{g.slice0(0), g.slice0(1), gb.slice0(0)};
  // The five-level pyramid needs a 32x32 input.
  const Tensor p32 = oracle::random_tensor({1, 1, 32, 32}, rng, 0, 1), g32 = oracle::random_tensor({1, 1, 32, 32}, rng, 0, 1);

  std::vector<std::pair<std::string, double>> errs{
      {"l1", oracle::gradcheck([&](const Var& x) { return l1(x, g); }, p)},
      {"laplacian", oracle::gradcheck([&](const Var& x) { return laplacian_pyramid(x, g32); }, p32)},
      {"ce", oracle::gradcheck([&](const Var& x) { return bce_with_logits(x, gb); }, logits)},
      {"dice", oracle::gradcheck([&](const Var& x) { return dice(x, gb); }, logits)},
      {"change", oracle::gradcheck([&](const Var& x) { return change_mask(x, gb); }, logits)},
      {"ddc", oracle::gradcheck([&](const Var& x) { return ddc_original(x, img, band); }, p)},
      {"ddc_scaled", oracle::gradcheck([&](const Var& x) { return ddc_scaled(x, img, band); }, p)},
      {"core", oracle::gradcheck([&](const Var& x) { return core_supervision(x, seg1, img.slice0(0), part); }, p.slice0(0))},
  };
  double tc = 0;
  for (int t = 0; t < 3; ++t) {
    tc = std::max(tc, oracle::gradcheck(
                          [&](const Var& x) {
                            std::vector<Var> frames;
                            for (int s = 0; s < 3; ++s) frames.push_back(s == t ? x : ag::constant(seq.slice0(s)));
                            return temporal_coherence(frames, gseq);
                          },
                          seq.slice0(t)));
  }
  errs.emplace_back("tc", tc);
  bool pass = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    pass = pass && e < 1e-3;
    detail += name + "=" + fmt("%.1e", e) + " ";
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- 5

Outcome metric_oracles() {
  double worst = 0;
  auto upd = [&](double a, double b) { worst = std::max(worst, std::fabs(a - b)); };
  std::uniform_real_distribution<double> noise(-0.15, 0.15);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor gt({3, 1, 16, 16}), pred({3, 1, 16, 16});
    for (int t = 0; t < 3; ++t)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const double d = std::hypot(x - 8.0 - t * 0.6 - trial * 0.1, y - 8.0) - 4.0;
          gt.at(t, 0, y, x) = std::clamp(0.5 - d / 3.0, 0.0, 1.0);
          pred.at(t, 0, y, x) = std::clamp(gt.at(t, 0, y, x) + noise(rng), 0.0, 1.0);
        }
    upd(metrics::mad(pred, gt), oracle::mad(pred, gt));
    upd(metrics::mse(pred, gt), oracle::mse(pred, gt));
    upd(metrics::grad(pred, gt), oracle::per_frame(pred, gt, [](const Tensor& a, const Tensor& b) { return oracle::grad_frame(a, b, 1.4); }));
    upd(metrics::conn(pred, gt), oracle::per_frame(pred, gt, oracle::conn_frame));
    upd(metrics::dtssd(pred, gt), oracle::dtssd(pred, gt));
    const Tensor seg = binarize_alpha(gt, 128);
    const metrics::CoreMetrics c = metrics::core_region_metrics(pred, seg, 3);
    const oracle::Core o = oracle::core_metrics(pred, seg, 3);
    upd(c.mad, o.mad);
    upd(c.mse, o.mse);
    upd(c.dtssd, o.dtssd);
  }
  const Tensor base({2, 1, 16, 16}, 0.3);
  Tensor off = base;
  for (auto& v : off.storage()) v += 0.1;
  const double m = metrics::mad(off, base);
  return {worst <= 1e-9 && std::fabs(m - 100.0) <= 1e-9, fmt("max oracle gap %.3g, offset-0.1 MAD = %.12f", worst, m)};
}

// ---------------------------------------------------------------- 6

Outcome change_mask_scan() {
  long mismatches = 0, cases = 0;
  Tensor prev({1, 1, 32, 32});
  std::bernoulli_distribution coin(0.5);
  for (auto& v : prev.storage()) v = coin(rng) ? 1.0 : 0.0;
  // Single-pixel perturbations at every position, just below, at and above
  // the threshold.
  for (int f : {4, 8, 16}) {
    for (int p = 0; p < 32 * 32; ++p) {
      for (double d : {0.0009, 0.001, 0.0011}) {
        Tensor cur = prev;
        cur[static_cast<std::size_t>(p)] += prev[static_cast<std::size_t>(p)] > 0.5 ? -d : d;
        const Tensor got = memory::ground_truth_change_mask(prev, cur, 0.001, DataKind::Matting, f);
        const Tensor want = oracle::change_mask(prev, cur, 0.001, false, f);
        mismatches += got.storage() != want.storage();
        // Exactly the containing cell is set iff |d| >= delta.
        const int cell = (p / 32 / f) * (32 / f) + (p % 32) / f;
        for (std::size_t c = 0; c < got.numel(); ++c) {
          const double expect = static_cast<int>(c) == cell && d >= 0.001 ? 1.0 : 0.0;
          mismatches += got[c] != expect;
        }
        ++cases;
      }
      Tensor flip = prev;
      flip[static_cast<std::size_t>(p)] = 1.0 - flip[static_cast<std::size_t>(p)];
      mismatches += memory::ground_truth_change_mask(prev, flip, 0.0, DataKind::Segmentation, f).sum() != 1.0;
      mismatches += memory::ground_truth_change_mask(prev, prev, 0.0, DataKind::Segmentation, f).sum() != 0.0;
      cases += 2;
    }
  }
  // Random multi-pixel changes across several cells.
  std::bernoulli_distribution touch(0.01);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor cur = prev;
    for (auto& v : cur.storage())
      if (touch(rng)) v = trial % 2 ? 1.0 - v : std::clamp(v + 0.002 * (u(rng) - 0.5), 0.0, 1.0);
    for (int f : {4, 8, 16}) {
      mismatches += memory::ground_truth_change_mask(prev, cur, 0.001, DataKind::Matting, f).storage() !=
                    oracle::change_mask(prev, cur, 0.001, false, f).storage();
      mismatches += memory::ground_truth_change_mask(prev, cur, 0.0, DataKind::Segmentation, f).storage() !=
                    oracle::change_mask(prev, cur, 0.0, true, f).storage();
      cases += 2;
    }
  }
  return {mismatches == 0, fmt("%g mismatches in %g cases", static_cast<double>(mismatches), static_cast<double>(cases))};
}

// ---------------------------------------------------------------- 7, 8, 9

struct Overfit {
  Manifest manifest;
  std::optional<MattingModel> model;
  double seconds = 0;
};

Overfit& overfit(const fs::path& work, const std::optional<fs::path>& checkpoint) {
  static Overfit o;
  if (o.model) return o;
  const fs::path data = work / "overfit_corpus";
  fs::remove_all(data);
  o.manifest = synth::generate_corpus(synth::CorpusConfig{}, data);
  const auto t0 = std::chrono::steady_clock::now();
  if (checkpoint) {
    o.model.emplace(training::load_checkpoint(*checkpoint).model);
  } else {
    const training::TrainConfig cfg;
    const training::TrainingData td = training::TrainingData::from_manifest(o.manifest, Split::Train);
    MattingModel model(cfg.model, cfg.seed);
    training::TrainState st = training::initial_state(cfg);
    for (int stage = 1; stage <= 2; ++stage) {
      training::begin_stage(st, cfg, stage);
      training::run_stage(cfg, td, model, st, [](const training::StepLog& l) {
        if ((l.iteration + 1) % 100 == 0) {
          std::cout << "  overfit stage " << l.stage << " iteration " << l.iteration + 1 << " loss " << l.total << std::endl;
        }
      });
    }
    training::save_checkpoint(work / "overfit.ckpt", cfg, model, st);
    o.model.emplace(std::move(model));
  }
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

std::vector<const ClipManifest*> train_matting(const Manifest& m) { return m.select(Split::Train, DataKind::Matting); }

Tensor first_mask(const LoadedClip& c) { return binarize_alpha(c.alpha->frame(0), 50); }

Outcome overfit_quality(const fs::path& work, const std::optional<fs::path>& ck) {
  Overfit& o = overfit(work, ck);
  std::vector<metrics::ReportRow> rows;
  for (const ClipManifest* c : train_matting(o.manifest)) {
    const LoadedClip clip = load_clip(o.manifest, *c);
    const AlphaSequence pred = inference::propagate(clip.clip, first_mask(clip), *o.model);
    rows.push_back(metrics::evaluate_clip(c->clip_id, pred.alpha, clip.alpha->alpha, clip.mask.mask, 7));
  }
  const metrics::Report rep = metrics::aggregate_rows(rows);
  metrics::write_report_csv(rep, work / "overfit_report.csv");
  const auto& a = rep.aggregate;
  const bool pass = rows.size() == 4 && rep.all_ok() && a.mad < 20 && a.dtssd < 5 && a.core_mad < 5;
  return {pass, fmt("%g clips: MAD %.3f, dtSSD %.3f, core MAD %.3f", static_cast<double>(rows.size()), a.mad, a.dtssd, a.core_mad) +
                    fmt(" (training %.0f s)", o.seconds)};
}

Outcome memory_stability(const fs::path& work, const std::optional<fs::path>& ck) {
  Overfit& o = overfit(work, ck);
  const ClipManifest* c = train_matting(o.manifest).front();
  const LoadedClip clip = load_clip(o.manifest, *c);
  for (int t = 1; t < clip.clip.length(); ++t) {
    if (clip.clip.frame(t).storage() != clip.clip.frame(0).storage()) return {false, c->clip_id + " is not static"};
  }
  const AlphaSequence pred = inference::propagate(clip.clip, first_mask(clip), *o.model);
  const Tensor f0 = pred.frame(0);
  double worst = 0;
  for (int t = 1; t < pred.length(); ++t) worst = std::max(worst, metrics::mad(pred.frame(t), f0));
  return {clip.clip.length() == 24 && worst < 1.0, fmt("max per-frame MAD to frame 0 = %.4f over %g frames", worst, clip.clip.length())};
}

Outcome warmup_contraction(const fs::path& work, const std::optional<fs::path>& ck) {
  Overfit& o = overfit(work, ck);
  const ClipManifest* c = train_matting(o.manifest)[1];
  const LoadedClip clip = load_clip(o.manifest, *c);
  const Tensor mask = first_mask(clip);
  const inference::WarmupResult w = inference::warmup_first_frame(clip.clip.frame(0), mask, *o.model, 10);
  const Tensor band = trimap_from_segmask(mask, 7).boundary;
  std::vector<double> change;  // change[i] = band L1 between iterations i+1 and i+2
  for (std::size_t i = 1; i < w.iterations.size(); ++i) {
    double s = 0, n = 0;
    for (std::size_t p = 0; p < band.numel(); ++p)
      if (band[p] > 0) {
        s += std::fabs(w.iterations[i][p] - w.iterations[i - 1][p]);
        ++n;
      }
    change.push_back(s / n);
  }
  bool monotone = true;
  // Iteration pairs (3,4), (4,5), ... must not grow. Once the changes reach
  // round-off they only jitter, hence the 1e-12 slack.
  for (std::size_t i = 3; i < change.size(); ++i) monotone = monotone && change[i] <= change[i - 1] + 1e-12;
  double last = 0;
  for (std::size_t p = 0; p < w.alpha.numel(); ++p) last += std::fabs(w.iterations[9][p] - w.iterations[8][p]);
  last /= static_cast<double>(w.alpha.numel());
  std::string seq;
  for (double v : change) seq += fmt("%.2e ", v);
  return {monotone && last < 1e-3, "band L1 changes: " + seq + fmt("| mean |n10-n9| = %.3g", last)};
}

// ---------------------------------------------------------------- 10

Outcome routing() {
  bool table = true;
  for (int s = 1; s <= 3; ++s) {
    table = table && training::route_batch(DataKind::Matting, s) == training::LossSet{true, false, false, true};
    table = table && training::route_batch(DataKind::Segmentation, s) == training::LossSet{false, true, s >= 2, true};
  }
  ModelConfig mc;
  mc.encoder_widths = {4, 4, 6, 6, 8};
  mc.key_dim = 4;
  mc.value_dim = 6;
  mc.value_widths = {4, 4, 4, 4};
  mc.change_hidden = 4;
  mc.fusion_blocks = 1;
  mc.fusion_hidden = 8;
  mc.decoder_widths = {6, 6, 4, 4, 4};
  training::TrainConfig cfg;
  cfg.model = mc;
  cfg.batch_size = 2;
  synth::CorpusConfig cc;
  cc.height = cc.width = 32;
  const synth::RenderedClip r = synth::render_clip(synth::random_scene(cc, 5, DataKind::Segmentation, false), 6);
  training::TrainingData data;
  LoadedClip lc;
  lc.meta.data_kind = DataKind::Segmentation;
  lc.meta.frame_count = 6;
  lc.clip = r.clip;
  lc.mask = r.mask;
  data.segmentation.push_back(lc);
  bool reach = true;
  std::string detail;
  for (int s = 1; s <= 3; ++s) {
    MattingModel model(mc, 3);
    std::mt19937_64 brng(s);
    const training::Batch b = training::sample_batch(data, cfg, cfg.stages[0], 0, DataKind::Segmentation, brng);
    backward(training::batch_loss(model, b, cfg, s, nullptr));
    double norm = 0;
    for (const Var& p : model.alpha_head_parameters())
      if (p.has_grad())
        for (double g : p.grad().storage()) norm += g * g;
    reach = reach && ((norm > 0) == (s >= 2));
    detail += fmt("stage %g |grad alpha head| = %.3g; ", s, std::sqrt(norm));
  }
  return {table && reach, std::string(table ? "table matches; " : "table differs; ") + detail};
}

// ---------------------------------------------------------------- 11

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Outcome determinism(const fs::path& work, const std::string& cli) {
  if (cli.empty()) return {false, "no --cli binary given"};
  std::vector<std::string> losses, reports;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = work / ("determinism_" + std::to_string(run));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string();
    const std::string cmds[] = {
        cli + " datagen --out " + d + "/data --seed 3",
        cli + " train --manifest " + d + "/data/manifest.json --stage 1 --iterations 200 --seed 3 --out " + d + "/m.ckpt --log-every 0",
        cli + " infer --checkpoint " + d + "/m.ckpt --manifest " + d + "/data/manifest.json --split val --out " + d + "/pred",
        cli + " eval --manifest " + d + "/data/manifest.json --predictions " + d + "/pred --split val --out " + d + "/report.csv",
    };
    for (const std::string& c : cmds) {
      if (std::system((c + " > " + d + "/log.txt 2>&1").c_str()) != 0) return {false, "command failed: " + c};
    }
    losses.push_back(slurp(dir / "m.ckpt.losses.csv"));
    reports.push_back(slurp(dir / "report.csv"));
  }
  const bool same = losses[0] == losses[1] && reports[0] == reports[1] && !losses[0].empty() && !reports[0].empty();
  return {same, std::string("loss CSVs ") + (losses[0] == losses[1] ? "identical" : "differ") + ", metric CSVs " +
                    (reports[0] == reports[1] ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  fs::path work = fs::temp_directory_path() / "memprop_acceptance";
  std::optional<fs::path> checkpoint;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--checkpoint" && i + 1 < argc) {
      checkpoint = fs::path(argv[++i]);
    } else {
      only.insert(std::stoi(a));
    }
  }
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"fusion endpoints", fusion_endpoints},
      {"affinity rows are stochastic", affinity_stochastic},
      {"scaled DDC vanishes on constant-layer composites", scaled_ddc_zero},
      {"loss gradients match finite differences", loss_gradients},
      {"metrics match brute-force oracles", metric_oracles},
      {"change-mask derivation", change_mask_scan},
      {"overfit on 4 clips", [&] { return overfit_quality(work, checkpoint); }},
      {"memory stability on a static clip", [&] { return memory_stability(work, checkpoint); }},
      {"warm-up contraction", [&] { return warmup_contraction(work, checkpoint); }},
      {"stage routing table", routing},
      {"seeded end-to-end determinism", [&] { return determinism(work, cli); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << criteria[i].first << " | " << o.detail
              << fmt(" [%.1f s]", sec) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}

// SPDX-License-Identifier: Apache-2.0
#include "memprop/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "memprop/evaluation.hpp"
#include "memprop/image_io.hpp"
#include "memprop/inference.hpp"
#include "memprop/synthdata.hpp"
#include "memprop/training.hpp"

namespace memprop::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv(kSeedEnv);
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string(kSeedEnv) + ": not an unsigned integer");
  }
}

// Seed precedence: flag > environment > config file.
std::uint64_t resolve_seed(std::uint64_t configured, const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return configured;
}

struct DatagenArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_datagen(const DatagenArgs& a, std::ostream& out) {
  synth::CorpusConfig cfg;
  if (!a.config.empty()) cfg = synth::CorpusConfig::from_json(read_json_file(a.config));
  cfg.seed = resolve_seed(cfg.seed, a.seed);
  const Manifest m = synth::generate_corpus(cfg, a.out);
  out << "wrote " << m.clips.size() << " clips to " << a.out << " (seed " << cfg.seed << ")\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string manifest;
  int stage = 1;
  std::string out;
  std::string init;
  std::string loss_csv;
  std::optional<int> iterations;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> batch_size;
  bool deterministic = false;
  int jobs = 1;
  int log_every = 50;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  if (a.stage < 1 || a.stage > 3) throw ConfigError("--stage must be 1, 2 or 3");
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");
  if (a.stage > 1 && a.init.empty()) {
    throw InputError("stage " + std::to_string(a.stage) + " needs the previous stage's checkpoint (--init)");
  }
  std::optional<training::Checkpoint> prior;
  if (!a.init.empty()) {
    if (!fs::exists(a.init)) throw InputError("checkpoint not found: " + a.init);
    prior = training::load_checkpoint(a.init);
  }
  training::TrainConfig cfg;
  if (!a.config.empty()) cfg = training::TrainConfig::from_json(read_json_file(a.config));
  else if (prior) cfg = prior->config;
  cfg.seed = resolve_seed(cfg.seed, a.seed);
  auto& st = cfg.stages[static_cast<std::size_t>(a.stage - 1)];
  if (a.iterations) st.iterations = *a.iterations;
  if (a.lr) st.lr = *a.lr;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  cfg.validate();

  const Manifest manifest = load_manifest(a.manifest);
  validate_manifest_files(manifest);
  const training::TrainingData data = training::TrainingData::from_manifest(manifest, Split::Train);

  MattingModel model(cfg.model, cfg.seed);
  training::TrainState state = training::initial_state(cfg);
  if (prior) {
    if (!(prior->config.model == cfg.model)) throw ConfigError("train.model: differs from the checkpoint's model");
    training::copy_parameters(prior->model, model);
    state = prior->state;
  }
  const bool resume = prior && state.stage == a.stage && state.iteration < st.iterations;
  if (!resume) training::begin_stage(state, cfg, a.stage);

  const fs::path csv_path = a.loss_csv.empty() ? fs::path(a.out + ".losses.csv") : fs::path(a.loss_csv);
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  std::ofstream csv(csv_path, resume ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write loss CSV " + csv_path.string());
  if (!resume) csv << training::loss_csv_header() << '\n';

  training::run_stage(cfg, data, model, state, [&](const training::StepLog& log) {
    csv << training::loss_csv_row(log) << '\n';
    if (a.log_every > 0 && (log.iteration + 1) % a.log_every == 0) {
      out << "stage " << log.stage << " iter " << log.iteration + 1 << "/" << st.iterations << " loss " << log.total << std::endl;
    }
  });
  training::save_checkpoint(a.out, cfg, model, state);
  out << "saved " << a.out << " (stage " << a.stage << ", seed " << cfg.seed << ")\n";
  return kExitOk;
}

struct InferArgs {
  std::string config;
  std::string checkpoint;
  std::string clip;
  std::string mask;
  std::string manifest;
  std::string split;
  std::string out;
  std::optional<int> warmup_iters;
  std::optional<int> memory_interval;
  std::optional<int> memory_capacity;
  std::optional<int> guidance_threshold;
  bool preview = false;
  int jobs = 1;
};

void write_preview(const fs::path& dir, const VideoClip& clip, const AlphaSequence& alpha) {
  for (int t = 0; t < clip.length(); ++t) {
    Tensor img({1, 3, clip.height(), clip.width()});
    const double green[3] = {0.0, 1.0, 0.0};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < clip.height(); ++y)
        for (int x = 0; x < clip.width(); ++x) {
          const double a = alpha.alpha.at(t, 0, y, x);
          img.at(0, c, y, x) = a * clip.frames.at(t, c, y, x) + (1.0 - a) * green[c];
        }
    write_png(dir / frame_filename(t), img, 8);
  }
}

int cmd_infer(const InferArgs& a, std::ostream& out) {
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");
  inference::InferenceConfig icfg;
  int guidance_threshold = 50;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      try {
        if (k == "warmup_iters") icfg.warmup_iters = it->get<int>();
        else if (k == "memory_interval") icfg.memory.update_interval = it->get<int>();
        else if (k == "memory_capacity") icfg.memory.capacity = it->get<int>();
        else if (k == "guidance_threshold") guidance_threshold = it->get<int>();
        else throw ConfigError("infer." + k + ": unknown field");
      } catch (const json::exception&) {
        throw ConfigError("infer." + k + ": wrong type");
      }
    }
  }
  if (a.warmup_iters) icfg.warmup_iters = *a.warmup_iters;
  if (a.memory_interval) icfg.memory.update_interval = *a.memory_interval;
  if (a.memory_capacity) icfg.memory.capacity = *a.memory_capacity;
  if (a.guidance_threshold) guidance_threshold = *a.guidance_threshold;
  if (!a.checkpoint.empty() && !fs::exists(a.checkpoint)) throw InputError("checkpoint not found: " + a.checkpoint);
  icfg.validate();
  const training::Checkpoint ck = training::load_checkpoint(a.checkpoint);

  auto run_one = [&](const VideoClip& clip, const Tensor& mask, const fs::path& dir) {
    const AlphaSequence alpha = inference::propagate(clip, mask, ck.model, icfg);
    write_sequence(dir, alpha.alpha, 16);
    if (a.preview) write_preview(dir / "preview", clip, alpha);
    return alpha.length();
  };

  const fs::path out_dir(a.out);
  json run = {{"checkpoint", a.checkpoint},
              {"seed", ck.config.seed},
              {"warmup_iters", icfg.warmup_iters},
              {"memory_interval", icfg.memory.update_interval},
              {"memory_capacity", icfg.memory.capacity}};
  if (!a.manifest.empty()) {
    const Manifest m = load_manifest(a.manifest);
    std::optional<Split> split;
    if (!a.split.empty()) split = parse_split(a.split);
    int clips = 0;
    for (const ClipManifest* c : m.select(split, std::nullopt)) {
      const LoadedClip lc = load_clip(m, *c);
      const Tensor first = lc.alpha ? binarize_alpha(lc.alpha->frame(0), guidance_threshold) : lc.mask.frame(0);
      run_one(lc.clip, first, out_dir / c->clip_id);
      ++clips;
    }
    run["manifest"] = a.manifest;
    out << "propagated " << clips << " clips into " << a.out << '\n';
  } else {
    if (a.clip.empty() || a.mask.empty()) throw ConfigError("infer needs --clip and --mask, or --manifest");
    if (!fs::exists(a.mask)) throw InputError("mask file not found: " + a.mask);
    fs::path frames_dir(a.clip);
    if (fs::is_directory(frames_dir / "frames")) frames_dir /= "frames";
    const int n = count_frames(frames_dir);
    if (n == 0) throw InputError("no frames found in " + frames_dir.string());
    VideoClip clip{read_sequence(frames_dir, n), 25.0};
    if (clip.frames.dim(1) != 3) throw InputError("clip frames must be RGB");
    Tensor mask = read_png(a.mask);
    if (mask.dim(1) != 1) throw InputError("mask must be a single-channel image");
    mask = binarize_alpha(mask, 128);
    const int written = run_one(clip, mask, out_dir);
    run["clip"] = a.clip;
    run["mask"] = a.mask;
    out << "wrote " << written << " mattes to " << a.out << '\n';
  }
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "infer.json") << run.dump(2) << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string config;
  std::string manifest;
  std::string predictions;
  std::string out;
  std::string split;
  std::optional<int> core_kernel;
  int jobs = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");
  int kernel = 7;
  std::string split_name = a.split;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      try {
        if (k == "core_kernel") kernel = it->get<int>();
        else if (k == "split") {
          if (split_name.empty()) split_name = it->get<std::string>();
        } else throw ConfigError("eval." + k + ": unknown field");
      } catch (const json::exception&) {
        throw ConfigError("eval." + k + ": wrong type");
      }
    }
  }
  if (a.core_kernel) kernel = *a.core_kernel;
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("--core-kernel must be odd and >= 1");
  std::optional<Split> split;
  if (!split_name.empty()) split = parse_split(split_name);
  const Manifest m = load_manifest(a.manifest);
  const metrics::Report rep = metrics::benchmark_report(m, a.predictions, kernel, split);
  metrics::write_report_csv(rep, fs::path(a.out));
  for (const auto& r : rep.rows)
    if (!r.ok) err << "clip " << r.clip_id << ": " << r.error << '\n';
  out << "evaluated " << rep.rows.size() << " clips -> " << a.out << '\n';
  return rep.all_ok() ? kExitOk : kExitUser;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"memprop-matte: memory-propagation video matting"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Render the synthetic corpus and its manifest");
  datagen->add_option("--config", dg.config, "Corpus config (JSON)")->check(CLI::ExistingFile);
  datagen->add_option("--out", dg.out, "Output directory")->required();
  datagen->add_option("--seed", dg.seed, "Seed override");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--config", tr.config, "Training config (JSON)")->check(CLI::ExistingFile);
  train->add_option("--manifest", tr.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--stage", tr.stage, "Stage 1, 2 or 3")->required();
  train->add_option("--out", tr.out, "Output checkpoint")->required();
  train->add_option("--init", tr.init, "Checkpoint to start from (required for stages 2-3)");
  train->add_option("--loss-csv", tr.loss_csv, "Loss curve CSV (default <out>.losses.csv)");
  train->add_option("--iterations", tr.iterations, "Override the stage iteration budget");
  train->add_option("--lr", tr.lr, "Override the stage learning rate");
  train->add_option("--seed", tr.seed, "Seed override");
  train->add_option("--batch-size", tr.batch_size, "Override the batch size");
  train->add_flag("--deterministic", tr.deterministic, "Bitwise-reproducible run (always on; single-threaded)");
  train->add_option("--jobs", tr.jobs, "Upper bound on worker threads");
  train->add_option("--log-every", tr.log_every, "Progress line every N iterations (0 = quiet)");

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Propagate a first-frame mask through a clip");
  infer->add_option("--config", inf.config, "Inference config (JSON)")->check(CLI::ExistingFile);
  infer->add_option("--checkpoint", inf.checkpoint, "Model checkpoint")->required();
  infer->add_option("--clip", inf.clip, "Clip directory (frames/%05d.png or %05d.png)");
  infer->add_option("--mask", inf.mask, "First-frame mask image");
  infer->add_option("--manifest", inf.manifest, "Propagate every clip of a manifest instead");
  infer->add_option("--split", inf.split, "Manifest split filter (train|val|test)");
  infer->add_option("--out", inf.out, "Output directory")->required();
  infer->add_option("--warmup-iters", inf.warmup_iters, "First-frame refinement iterations (default 10)");
  infer->add_option("--memory-interval", inf.memory_interval, "Memory update interval r (default 5)");
  infer->add_option("--memory-capacity", inf.memory_capacity, "Memory capacity in frames (default 8)");
  infer->add_option("--guidance-threshold", inf.guidance_threshold, "Manifest mode: GT alpha threshold for the mask (default 50)");
  infer->add_flag("--preview", inf.preview, "Also write green-screen composites");
  infer->add_option("--jobs", inf.jobs, "Upper bound on worker threads");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score predictions against a manifest");
  eval->add_option("--config", ev.config, "Evaluation config (JSON)")->check(CLI::ExistingFile);
  eval->add_option("--manifest", ev.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--predictions", ev.predictions, "Prediction root (<clip_id>/%05d.png)")->required();
  eval->add_option("--out", ev.out, "Report CSV")->required();
  eval->add_option("--split", ev.split, "Only clips of this split");
  eval->add_option("--core-kernel", ev.core_kernel, "Trimap kernel for core metrics (default 7)");
  eval->add_option("--jobs", ev.jobs, "Upper bound on worker threads");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  }

  try {
    if (*datagen) return cmd_datagen(dg, out);
    if (*train) return cmd_train(tr, out);
    if (*infer) return cmd_infer(inf, out);
    if (*eval) return cmd_eval(ev, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUser;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUser;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitUser;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace memprop::cli

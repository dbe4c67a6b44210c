// SPDX-License-Identifier: Apache-2.0
#include "memprop/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "memprop/image_io.hpp"
#include "memprop/inference.hpp"

namespace memprop::training {

namespace fs = std::filesystem;
using nlohmann::json;

LossSet route_batch(DataKind kind, int stage) {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  LossSet s;
  s.change_mask = true;
  switch (kind) {
    case DataKind::Matting:
      s.matting = true;
      break;
    case DataKind::Segmentation:
      s.segmentation = true;
      s.core_supervision = stage >= 2;
      break;
    default:
      throw InputError("route_batch: unknown data kind");
  }
  return s;
}

// ---------------------------------------------------------------- configs

namespace {

// Reads obj[key] into dst when present; type errors name the field path.
template <typename T>
void read(const json& obj, const std::string& path, const char* key, T& dst) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  std::set<std::string> names(known.begin(), known.end());
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!names.count(it.key())) throw ConfigError(path + "." + it.key() + ": unknown field");
  }
}

json memory_to_json(const memory::MemoryConfig& m) {
  return {{"update_interval", m.update_interval}, {"capacity", m.capacity}, {"similarity_scale", m.similarity_scale}};
}

memory::MemoryConfig memory_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"update_interval", "capacity", "similarity_scale"});
  memory::MemoryConfig m;
  read(j, path, "update_interval", m.update_interval);
  read(j, path, "capacity", m.capacity);
  read(j, path, "similarity_scale", m.similarity_scale);
  return m;
}

json weights_to_json(const losses::LossWeights& w) {
  return {{"lap", w.lap}, {"tc", w.tc}, {"boundary", w.boundary}, {"core", w.core}};
}

losses::LossWeights weights_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"lap", "tc", "boundary", "core"});
  losses::LossWeights w;
  read(j, path, "lap", w.lap);
  read(j, path, "tc", w.tc);
  read(j, path, "boundary", w.boundary);
  read(j, path, "core", w.core);
  return w;
}

json ddc_to_json(const losses::DdcConfig& d) {
  return {{"window", d.window},
          {"neighbors", d.neighbors},
          {"fb_topk", d.fb_topk},
          {"luminance", d.luminance},
          {"min_contrast", d.min_contrast}};
}

losses::DdcConfig ddc_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"window", "neighbors", "fb_topk", "luminance", "min_contrast"});
  losses::DdcConfig d;
  read(j, path, "window", d.window);
  read(j, path, "neighbors", d.neighbors);
  read(j, path, "fb_topk", d.fb_topk);
  read(j, path, "luminance", d.luminance);
  read(j, path, "min_contrast", d.min_contrast);
  return d;
}

json augment_to_json(const synth::AugmentationSpec& a) {
  return {{"max_shift", a.motion.max_shift},   {"max_scale", a.motion.max_scale}, {"max_rotation", a.motion.max_rotation},
          {"reverse_prob", a.reverse_prob},    {"erode_prob", a.erode_prob},       {"dilate_prob", a.dilate_prob},
          {"kernels", a.kernels}};
}

synth::AugmentationSpec augment_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"max_shift", "max_scale", "max_rotation", "reverse_prob", "erode_prob", "dilate_prob", "kernels"});
  synth::AugmentationSpec a;
  read(j, path, "max_shift", a.motion.max_shift);
  read(j, path, "max_scale", a.motion.max_scale);
  read(j, path, "max_rotation", a.motion.max_rotation);
  read(j, path, "reverse_prob", a.reverse_prob);
  read(j, path, "erode_prob", a.erode_prob);
  read(j, path, "dilate_prob", a.dilate_prob);
  read(j, path, "kernels", a.kernels);
  return a;
}

}  // namespace

StageConfig StageConfig::defaults(int stage) {
  StageConfig s;
  s.stage = stage;
  switch (stage) {
    case 1:
      s.iterations = 850;
      s.lr = 1e-4;
      s.long_from = 800;
      break;
    case 2:
      s.iterations = 400;
      s.lr = 1e-5;
      s.long_from = 0;
      break;
    case 3:
      s.iterations = 50;
      s.lr = 1e-6;
      s.long_from = 0;
      s.matting_from_images = true;
      break;
    default:
      throw ConfigError("stage must be 1, 2 or 3");
  }
  return s;
}

int StageConfig::sequence_length(int iteration) const { return iteration >= long_from ? long_length : short_length; }
int StageConfig::max_interval(int iteration) const {
  return iteration >= long_from ? long_max_interval : short_max_interval;
}

void StageConfig::validate() const {
  const std::string p = "stages[" + std::to_string(stage - 1) + "]";
  if (stage < 1 || stage > 3) throw ConfigError(p + ".stage: must be 1, 2 or 3");
  if (iterations < 0) throw ConfigError(p + ".iterations: must be >= 0");
  if (!(lr > 0.0)) throw ConfigError(p + ".lr: must be > 0");
  if (short_length < 2 || long_length < 2) throw ConfigError(p + ": sequence lengths must be >= 2");
  if (short_max_interval < 1 || long_max_interval < 1) throw ConfigError(p + ": max intervals must be >= 1");
  if (long_from < 0) throw ConfigError(p + ".long_from: must be >= 0");
}

json StageConfig::to_json() const {
  return {{"iterations", iterations},
          {"lr", lr},
          {"short_length", short_length},
          {"long_length", long_length},
          {"long_from", long_from},
          {"short_max_interval", short_max_interval},
          {"long_max_interval", long_max_interval},
          {"matting_from_images", matting_from_images}};
}

StageConfig StageConfig::from_json(const json& j, int stage) {
  const std::string p = "train.stages[" + std::to_string(stage - 1) + "]";
  reject_unknown(j, p,
                 {"iterations", "lr", "short_length", "long_length", "long_from", "short_max_interval", "long_max_interval",
                  "matting_from_images"});
  StageConfig s = defaults(stage);
  read(j, p, "iterations", s.iterations);
  read(j, p, "lr", s.lr);
  read(j, p, "short_length", s.short_length);
  read(j, p, "long_length", s.long_length);
  read(j, p, "long_from", s.long_from);
  read(j, p, "short_max_interval", s.short_max_interval);
  read(j, p, "long_max_interval", s.long_max_interval);
  read(j, p, "matting_from_images", s.matting_from_images);
  return s;
}

void TrainConfig::validate() const {
  model.validate();
  memory.validate();
  weights.validate();
  ddc.validate();
  augment.validate();
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay: must be >= 0");
  if (matting_per_cycle < 0 || segmentation_per_cycle < 0 || matting_per_cycle + segmentation_per_cycle == 0) {
    throw ConfigError("train.matting_per_cycle/segmentation_per_cycle: invalid batch ratio");
  }
  if (segmentation_image_prob < 0.0 || segmentation_image_prob > 1.0) {
    throw ConfigError("train.segmentation_image_prob: must be in [0,1]");
  }
  if (core_kernel < 1 || core_kernel % 2 == 0) throw ConfigError("train.core_kernel: must be odd and >= 1");
  if (guidance_threshold < 0 || guidance_threshold > 255) throw ConfigError("train.guidance_threshold: must be in [0,255]");
  for (const auto& s : stages) s.validate();
}

json TrainConfig::to_json() const {
  json st = json::array();
  for (const auto& s : stages) st.push_back(s.to_json());
  return {{"seed", seed},
          {"model", model.to_json()},
          {"memory", memory_to_json(memory)},
          {"weights", weights_to_json(weights)},
          {"ddc", ddc_to_json(ddc)},
          {"augment", augment_to_json(augment)},
          {"batch_size", batch_size},
          {"weight_decay", weight_decay},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"matting_per_cycle", matting_per_cycle},
          {"segmentation_per_cycle", segmentation_per_cycle},
          {"segmentation_image_prob", segmentation_image_prob},
          {"core_kernel", core_kernel},
          {"guidance_threshold", guidance_threshold},
          {"segmentation_from_matting", segmentation_from_matting},
          {"stages", st}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  const std::string p = "train";
  reject_unknown(j, p,
                 {"seed", "model", "memory", "weights", "ddc", "augment", "batch_size", "weight_decay", "adam_beta1",
                  "adam_beta2", "adam_eps", "matting_per_cycle", "segmentation_per_cycle", "segmentation_image_prob",
                  "core_kernel", "guidance_threshold", "segmentation_from_matting", "stages"});
  TrainConfig c;
  read(j, p, "seed", c.seed);
  if (j.contains("model")) {
    try {
      c.model = ModelConfig::from_json(j["model"]);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("train.") + e.what());
    }
  }
  if (j.contains("memory")) c.memory = memory_from_json(j["memory"], p + ".memory");
  if (j.contains("weights")) c.weights = weights_from_json(j["weights"], p + ".weights");
  if (j.contains("ddc")) c.ddc = ddc_from_json(j["ddc"], p + ".ddc");
  if (j.contains("augment")) c.augment = augment_from_json(j["augment"], p + ".augment");
  read(j, p, "batch_size", c.batch_size);
  read(j, p, "weight_decay", c.weight_decay);
  read(j, p, "adam_beta1", c.adam_beta1);
  read(j, p, "adam_beta2", c.adam_beta2);
  read(j, p, "adam_eps", c.adam_eps);
  read(j, p, "matting_per_cycle", c.matting_per_cycle);
  read(j, p, "segmentation_per_cycle", c.segmentation_per_cycle);
  read(j, p, "segmentation_image_prob", c.segmentation_image_prob);
  read(j, p, "core_kernel", c.core_kernel);
  read(j, p, "guidance_threshold", c.guidance_threshold);
  read(j, p, "segmentation_from_matting", c.segmentation_from_matting);
  if (j.contains("stages")) {
    const json& st = j["stages"];
    if (!st.is_array() || st.size() > 3) throw ConfigError("train.stages: expected an array of up to 3 stages");
    for (std::size_t i = 0; i < st.size(); ++i) c.stages[i] = StageConfig::from_json(st[i], static_cast<int>(i) + 1);
  }
  c.validate();
  return c;
}

// -------------------------------------------------------------- optimizer

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(MattingModel& model, double lr) {
  model.for_each_parameter([&](const std::string& name, Var& p) {
    if (!p.has_grad()) return;
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m = Tensor::zeros(p.shape());
      s.v = Tensor::zeros(p.shape());
    }
    ++s.step;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.step));
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    for (std::size_t i = 0; i < w.numel(); ++i) {
      w[i] -= lr * wd_ * w[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
    }
  });
}

// ------------------------------------------------------------------- data

TrainingData TrainingData::from_manifest(const Manifest& m, Split split) {
  TrainingData d;
  for (const ClipManifest* c : m.select(split, std::nullopt)) {
    LoadedClip clip = load_clip(m, *c);
    (c->data_kind == DataKind::Matting ? d.matting : d.segmentation).push_back(std::move(clip));
  }
  return d;
}

namespace {

struct Sample {
  std::vector<Tensor> frames;   // [1,3,H,W] each
  std::vector<Tensor> targets;  // [1,1,H,W] each
};

Sample window_sample(const LoadedClip& clip, const Tensor& target_seq, int length, int max_interval, double reverse_prob,
                     std::mt19937_64& rng) {
  const auto win = synth::sample_training_sequence(clip.clip.length(), length, max_interval, rng, reverse_prob);
  Sample s;
  for (int idx : win.indices) {
    s.frames.push_back(clip.clip.frame(idx));
    s.targets.push_back(target_seq.slice0(idx));
  }
  if (win.reversed) {
    std::reverse(s.frames.begin(), s.frames.end());
    std::reverse(s.targets.begin(), s.targets.end());
  }
  return s;
}

Sample image_sample(const LoadedClip& clip, const Tensor& target_seq, int length, const synth::MotionRange& motion,
                    bool binary, std::mt19937_64& rng) {
  const int idx = std::uniform_int_distribution<int>(0, clip.clip.length() - 1)(rng);
  auto [frames, targets] = synth::motion_augment(clip.clip.frame(idx), target_seq.slice0(idx), length, motion, rng);
  if (binary) {
    for (double& v : targets.values()) v = v >= 0.5 ? 1.0 : 0.0;
  }
  Sample s;
  for (int t = 0; t < length; ++t) {
    s.frames.push_back(frames.slice0(t));
    s.targets.push_back(targets.slice0(t));
  }
  return s;
}

}  // namespace

DataKind batch_kind(const TrainConfig& cfg, int iteration) {
  const int cycle = cfg.matting_per_cycle + cfg.segmentation_per_cycle;
  return iteration % cycle < cfg.matting_per_cycle ? DataKind::Matting : DataKind::Segmentation;
}

Batch sample_batch(const TrainingData& data, const TrainConfig& cfg, const StageConfig& stage, int iteration, DataKind kind,
                   std::mt19937_64& rng) {
  const bool seg = kind == DataKind::Segmentation;
  const std::vector<LoadedClip>& pool = seg && !cfg.segmentation_from_matting ? data.segmentation : data.matting;
  if (pool.empty()) {
    throw InputError(std::string("training data has no ") + (seg ? "segmentation" : "matting") + " clips");
  }
  const int length = stage.sequence_length(iteration);
  const int max_interval = stage.max_interval(iteration);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::vector<Sample> samples;
  std::vector<Tensor> guides;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const LoadedClip& clip = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const Tensor& target_seq = seg ? clip.mask.mask : clip.alpha->alpha;
    const bool as_image = seg ? u(rng) < cfg.segmentation_image_prob : stage.matting_from_images;
    Sample s = as_image ? image_sample(clip, target_seq, length, cfg.augment.motion, seg, rng)
                        : window_sample(clip, target_seq, length, max_interval, cfg.augment.reverse_prob, rng);
    const Tensor raw = seg ? s.targets.front() : binarize_alpha(s.targets.front(), cfg.guidance_threshold);
    Tensor g = synth::augment_given_mask(raw, cfg.augment, rng);
    if (g.sum() == 0.0) g = raw;  // erosion removed a tiny target
    guides.push_back(std::move(g));
    samples.push_back(std::move(s));
  }

  Batch batch;
  batch.kind = kind;
  for (int t = 0; t < length; ++t) {
    std::vector<Tensor> f, y;
    for (const auto& s : samples) {
      f.push_back(s.frames[static_cast<std::size_t>(t)]);
      y.push_back(s.targets[static_cast<std::size_t>(t)]);
    }
    batch.frames.push_back(concat0(f));
    batch.targets.push_back(concat0(y));
  }
  batch.guidance = concat0(guides);
  return batch;
}

// --------------------------------------------------------------- the step

Var batch_loss(const MattingModel& model, const Batch& batch, const TrainConfig& cfg, int stage, StepLog* log) {
  const LossSet ls = route_batch(batch.kind, stage);
  const std::size_t length = batch.frames.size();
  inference::Propagator prop(model, cfg.memory);
  std::vector<Var> alphas, segs, change_logits;
  for (std::size_t t = 0; t < length; ++t) {
    const Var frame = ag::constant(batch.frames[t]);
    const auto r = t == 0 ? prop.start(frame, ag::constant(batch.guidance), 1, ls.segmentation)
                          : prop.step(frame, ls.segmentation);
    alphas.push_back(r.alpha);
    segs.push_back(r.seg_logits);
    change_logits.push_back(r.change_logits);
  }

  std::vector<Var> total;
  auto record = [&](const char* name, const Var& v) {
    total.push_back(v);
    if (log) log->terms[name] = v.value()[0];
  };
  const double inv_t = 1.0 / static_cast<double>(length);
  if (ls.matting) record("mat", losses::matting(alphas, batch.targets, cfg.weights));
  if (ls.segmentation) {
    std::vector<Var> terms;
    for (std::size_t t = 0; t < length; ++t) terms.push_back(losses::segmentation(segs[t], batch.targets[t]));
    record("seg", ag::scale(ag::add_all(terms), inv_t));
  }
  if (ls.core_supervision) {
    std::vector<Var> terms;
    for (std::size_t t = 0; t < length; ++t) {
      const RegionPartition part = trimap_from_segmask(batch.targets[t], cfg.core_kernel);
      terms.push_back(losses::core_supervision(alphas[t], batch.targets[t], batch.frames[t], part, cfg.weights, cfg.ddc));
    }
    record("cs", ag::scale(ag::add_all(terms), inv_t));
  }
  if (ls.change_mask && length >= 2) {
    const double delta = memory::default_change_delta(batch.kind);
    std::vector<Var> terms;
    for (std::size_t t = 1; t < length; ++t) {
      const Tensor gt = memory::ground_truth_change_mask(batch.targets[t - 1], batch.targets[t], delta, batch.kind);
      terms.push_back(losses::change_mask(change_logits[t], gt));
    }
    record("change", ag::scale(ag::add_all(terms), 1.0 / static_cast<double>(length - 1)));
  }
  Var loss = ag::add_all(total);
  if (log) {
    log->kind = batch.kind;
    log->total = loss.value()[0];
  }
  return loss;
}

Trainer::Trainer(const TrainConfig& cfg, const TrainingData& data, MattingModel& model, TrainState& state)
    : cfg_(cfg), data_(data), model_(model), state_(state) {}

bool Trainer::done() const {
  return state_.iteration >= cfg_.stages[static_cast<std::size_t>(state_.stage - 1)].iterations;
}

StepLog Trainer::step() {
  const StageConfig& stage = cfg_.stages[static_cast<std::size_t>(state_.stage - 1)];
  StepLog log;
  log.stage = state_.stage;
  log.iteration = state_.iteration;
  log.lr = stage.lr;
  const DataKind kind = batch_kind(cfg_, state_.iteration);
  const Batch batch = sample_batch(data_, cfg_, stage, state_.iteration, kind, state_.rng);
  model_.for_each_parameter([](const std::string&, Var& p) { p.zero_grad(); });
  {
    Var loss = batch_loss(model_, batch, cfg_, state_.stage, &log);
    if (!std::isfinite(log.total)) throw std::runtime_error("training diverged: non-finite loss");
    backward(loss);
  }
  state_.optimizer.step(model_, stage.lr);
  for (const auto& [name, v] : log.terms) {
    auto it = state_.running.find(name);
    state_.running[name] = it == state_.running.end() ? v : 0.98 * it->second + 0.02 * v;
  }
  ++state_.iteration;
  return log;
}

TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.stage = 1;
  s.iteration = 0;
  s.optimizer = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  s.rng.seed(cfg.seed);
  return s;
}

void begin_stage(TrainState& state, const TrainConfig& cfg, int stage) {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  state.stage = stage;
  state.iteration = 0;
  state.optimizer = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  state.running.clear();
}

void run_stage(const TrainConfig& cfg, const TrainingData& data, MattingModel& model, TrainState& state,
               const StepCallback& on_step) {
  cfg.validate();
  Trainer trainer(cfg, data, model, state);
  while (!trainer.done()) {
    const StepLog log = trainer.step();
    if (on_step) on_step(log);
  }
}

// ------------------------------------------------------------- checkpoint

namespace {

void write_doubles(std::ostream& os, const Tensor& t) {
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_doubles(std::istream& is, Tensor& t, const fs::path& path) {
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (static_cast<std::size_t>(is.gcount()) != t.numel() * sizeof(double)) {
    throw IoError("checkpoint " + path.string() + " is truncated");
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainConfig& cfg, const MattingModel& model, const TrainState& state) {
  json params = json::array();
  model.for_each_parameter([&](const std::string& name, const Var& p) { params.push_back({{"name", name}, {"shape", p.shape()}}); });
  json slots = json::array();
  for (const auto& [name, s] : state.optimizer.slots()) {
    slots.push_back({{"name", name}, {"shape", s.m.shape()}, {"step", s.step}});
  }
  std::ostringstream rng;
  rng << state.rng;
  json header = {{"config", cfg.to_json()},
                 {"state", {{"stage", state.stage}, {"iteration", state.iteration}, {"running", state.running}, {"rng", rng.str()}}},
                 {"params", params},
                 {"optimizer", slots},
                 {"byte_order", "little"}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << kCheckpointHeader << '\n' << header.dump() << '\n';
  model.for_each_parameter([&](const std::string&, const Var& p) { write_doubles(os, p.value()); });
  for (const auto& [name, s] : state.optimizer.slots()) {
    write_doubles(os, s.m);
    write_doubles(os, s.v);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string magic, line;
  if (!std::getline(is, magic) || magic != kCheckpointHeader) {
    throw IoError("checkpoint " + path.string() + ": bad header (expected " + kCheckpointHeader + ")");
  }
  if (!std::getline(is, line)) throw IoError("checkpoint " + path.string() + " is truncated");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + ": corrupt metadata: " + e.what());
  }
  TrainConfig cfg = TrainConfig::from_json(header.at("config"));
  Checkpoint ck{cfg, MattingModel(cfg.model, 0), initial_state(cfg)};
  const json& st = header.at("state");
  ck.state.stage = st.at("stage").get<int>();
  ck.state.iteration = st.at("iteration").get<int>();
  ck.state.running = st.at("running").get<std::map<std::string, double>>();
  std::istringstream rng(st.at("rng").get<std::string>());
  rng >> ck.state.rng;
  if (!rng) throw IoError("checkpoint " + path.string() + ": corrupt rng state");

  const json& params = header.at("params");
  std::size_t i = 0;
  ck.model.for_each_parameter([&](const std::string& name, Var& p) {
    if (i >= params.size() || params[i].at("name").get<std::string>() != name ||
        params[i].at("shape").get<Shape>() != p.shape()) {
      throw IoError("checkpoint " + path.string() + ": parameter layout does not match the model config");
    }
    ++i;
    read_doubles(is, p.mutable_value(), path);
  });
  if (i != params.size()) throw IoError("checkpoint " + path.string() + ": extra parameters");
  for (const auto& sj : header.at("optimizer")) {
    AdamW::Slot s;
    s.m = Tensor(sj.at("shape").get<Shape>());
    s.v = Tensor(sj.at("shape").get<Shape>());
    s.step = sj.at("step").get<long>();
    read_doubles(is, s.m, path);
    read_doubles(is, s.v, path);
    ck.state.optimizer.slots()[sj.at("name").get<std::string>()] = std::move(s);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint " + path.string() + ": trailing data");
  return ck;
}

void copy_parameters(const MattingModel& from, MattingModel& to) {
  std::map<std::string, Tensor> values;
  from.for_each_parameter([&](const std::string& n, const Var& p) { values[n] = p.value(); });
  to.for_each_parameter([&](const std::string& n, Var& p) {
    auto it = values.find(n);
    if (it == values.end() || it->second.shape() != p.shape()) throw ShapeError("copy_parameters: layout mismatch at " + n);
    p.mutable_value() = it->second;
  });
}

std::string loss_csv_header() { return "stage,iteration,kind,lr,total,mat,seg,cs,change"; }

std::string loss_csv_row(const StepLog& log) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string row = std::to_string(log.stage) + "," + std::to_string(log.iteration) + "," +
                    std::string(to_string(log.kind)) + "," + num(log.lr) + "," + num(log.total);
  for (const char* k : {"mat", "seg", "cs", "change"}) {
    auto it = log.terms.find(k);
    row += ",";
    if (it != log.terms.end()) row += num(it->second);
  }
  return row;
}

}  // namespace memprop::training

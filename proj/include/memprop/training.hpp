// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training: per-stage data routing, loss composition, AdamW,
// and resumable checkpoints.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "memprop/image_io.hpp"
#include "memprop/losses.hpp"
#include "memprop/manifest.hpp"
#include "memprop/memory.hpp"
#include "memprop/network.hpp"
#include "memprop/synthdata.hpp"

namespace memprop::training {

inline constexpr const char* kCheckpointHeader = "memprop-matte-v1";

/// Losses applied to one batch.
struct LossSet {
  bool matting = false;
  bool segmentation = false;
  bool core_supervision = false;
  bool change_mask = false;
  bool operator==(const LossSet&) const = default;
};

/// Stage table: matting batches get L_mat, segmentation batches get L_seg on
/// the segmentation head and, from stage 2 on, L_cs on the matting head.
/// The change-mask loss is always on.
LossSet route_batch(DataKind kind, int stage);

struct StageConfig {
  int stage = 1;
  int iterations = 850;
  double lr = 1e-4;
  int short_length = 3;
  int long_length = 8;
  int long_from = 800;  ///< first iteration using long_length
  int short_max_interval = 2;
  int long_max_interval = 4;
  bool matting_from_images = false;  ///< stage 3: single frames, motion-augmented

  static StageConfig defaults(int stage);
  int sequence_length(int iteration) const;
  int max_interval(int iteration) const;
  void validate() const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j, int stage);
};

struct TrainConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  memory::MemoryConfig memory;
  losses::LossWeights weights;
  losses::DdcConfig ddc;
  synth::AugmentationSpec augment;
  int batch_size = 4;
  double weight_decay = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int matting_per_cycle = 1;       ///< batch ratio matting : segmentation
  int segmentation_per_cycle = 1;
  double segmentation_image_prob = 0.5;  ///< segmentation samples drawn as single images
  int core_kernel = 5;              ///< trimap kernel for core supervision
  int guidance_threshold = 50;      ///< binarization of matting GT for the first-frame mask
  bool segmentation_from_matting = false;  ///< reuse matting clips as segmentation data
  std::array<StageConfig, 3> stages{StageConfig::defaults(1), StageConfig::defaults(2), StageConfig::defaults(3)};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// AdamW with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, and each keeps its own step count.
class AdamW {
 public:
  struct Slot {
    Tensor m, v;
    long step = 0;
  };

  AdamW() = default;
  AdamW(double beta1, double beta2, double eps, double weight_decay);
  void step(MattingModel& model, double lr);
  void reset() { slots_.clear(); }

  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  std::map<std::string, Slot> slots_;
};

struct TrainState {
  int stage = 1;
  int iteration = 0;  ///< iterations completed in the current stage
  AdamW optimizer;
  std::mt19937_64 rng;
  std::map<std::string, double> running;  ///< EMA of each loss term
};

/// Training clips held in memory.
struct TrainingData {
  std::vector<LoadedClip> matting;
  std::vector<LoadedClip> segmentation;

  static TrainingData from_manifest(const Manifest& m, Split split = Split::Train);
};

struct Batch {
  DataKind kind = DataKind::Matting;
  std::vector<Tensor> frames;    // per time step, [B,3,H,W]
  std::vector<Tensor> targets;   // alpha (matting) or mask (segmentation), [B,1,H,W]
  Tensor guidance;               // [B,1,H,W]
};

/// Draws one batch of `kind` for the given stage iteration.
Batch sample_batch(const TrainingData& data, const TrainConfig& cfg, const StageConfig& stage, int iteration, DataKind kind,
                   std::mt19937_64& rng);

struct StepLog {
  int stage = 0;
  int iteration = 0;
  DataKind kind = DataKind::Matting;
  double lr = 0.0;
  double total = 0.0;
  std::map<std::string, double> terms;  // mat, seg, cs, change
};

/// Forward + losses for one batch. Returns the total loss Var (graph
/// attached) and fills `log`.
Var batch_loss(const MattingModel& model, const Batch& batch, const TrainConfig& cfg, int stage, StepLog* log);

/// Which data kind iteration `i` draws, following the batch ratio.
DataKind batch_kind(const TrainConfig& cfg, int iteration);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const TrainingData& data, MattingModel& model, TrainState& state);
  StepLog step();
  bool done() const;

 private:
  const TrainConfig& cfg_;
  const TrainingData& data_;
  MattingModel& model_;
  TrainState& state_;
};

/// Fresh state for `stage` (iteration 0, optimizer reset, rng kept).
void begin_stage(TrainState& state, const TrainConfig& cfg, int stage);

using StepCallback = std::function<void(const StepLog&)>;

/// Runs the remaining iterations of state.stage.
void run_stage(const TrainConfig& cfg, const TrainingData& data, MattingModel& model, TrainState& state,
               const StepCallback& on_step = {});

TrainState initial_state(const TrainConfig& cfg);

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const MattingModel& model,
                     const TrainState& state);

struct Checkpoint {
  TrainConfig config;
  MattingModel model;
  TrainState state;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameter values by name (shapes must match).
void copy_parameters(const MattingModel& from, MattingModel& to);

std::string loss_csv_header();
std::string loss_csv_row(const StepLog& log);

}  // namespace memprop::training

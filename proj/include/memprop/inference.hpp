// SPDX-License-Identifier: Apache-2.0
//
// Frame-by-frame propagation. Propagator holds the per-clip state (memory
// bank, last-frame memory, first-frame guidance tokens) and is shared by the
// training loop, which runs it with gradient recording on.
#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "memprop/memory.hpp"
#include "memprop/network.hpp"

namespace memprop::inference {

struct StepResult {
  Var alpha;          // [N,1,H,W]
  Var seg_logits;     // defined when requested
  Var change_logits;  // [N,1,H',W']; undefined on frame 0
  Var readout;        // fused pixel readout P_t, [N,H'W',C_v]
  Var queried;        // memory read-out V_t^m
  Var last_value;     // V_{t-1} used in the fusion; undefined on frame 0
  Var change_prob;    // U_t tokens [N,H'W',1]
};

class Propagator {
 public:
  Propagator(const MattingModel& model, memory::MemoryConfig memory);

  /// Frame 0. The guidance mask enters the value encoder as the "previous
  /// prediction"; the step is repeated `iterations` times with the last
  /// output as the next guidance. `per_iteration` receives every output.
  StepResult start(const Var& frame, const Var& guidance, int iterations, bool with_segmentation,
                   std::vector<Tensor>* per_iteration = nullptr);

  /// Frames 1..T-1, in order.
  StepResult step(const Var& frame, bool with_segmentation);

  /// Replaces the predicted change probability by a constant (tests only).
  void force_change_probability(std::optional<double> u) { forced_u_ = u; }

  const memory::MemoryBank& bank() const { return bank_; }
  const memory::LastFrameMemory& last() const { return last_; }
  int frames_seen() const { return next_index_; }

 private:
  StepResult run_first(const FeaturePyramid& pyr, const Var& frame, const Var& guidance, bool with_segmentation);

  const MattingModel& model_;
  memory::MemoryBank bank_;
  memory::LastFrameMemory last_;
  Var guidance_tokens_;
  int next_index_ = 0;
  std::optional<double> forced_u_;
};

struct InferenceConfig {
  int warmup_iters = 10;
  memory::MemoryConfig memory;
  void validate() const;
};

using FrameHook = std::function<void(int frame_index, const StepResult&)>;

/// clip frames [T,3,H,W]; first_mask [1,1,H,W] (binary, non-empty).
AlphaSequence propagate(const VideoClip& clip, const Tensor& first_mask, const MattingModel& model,
                        const InferenceConfig& cfg = {}, const FrameHook& hook = {},
                        std::optional<double> forced_change = std::nullopt);

struct WarmupResult {
  Tensor alpha;                   // output of iteration n
  std::vector<Tensor> iterations;  // outputs of iterations 1..n
};

WarmupResult warmup_first_frame(const Tensor& frame, const Tensor& first_mask, const MattingModel& model, int n,
                                memory::MemoryConfig memory = {});

}  // namespace memprop::inference

// SPDX-License-Identifier: Apache-2.0
//
// Alpha memory bank and the region-adaptive read-out.
//
// Token tensors are [N, tokens, channels]. Rank-2 inputs ([tokens, channels])
// are accepted by the free functions and treated as a batch of one.
#pragma once

#include <vector>

#include "memprop/autograd.hpp"
#include "memprop/core_types.hpp"

namespace memprop::memory {

/// Thrown when reading from a bank that holds no tokens.
class EmptyMemoryError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct MemoryConfig {
  int update_interval = 5;  ///< store every r-th frame (frame 0 always)
  int capacity = 8;         ///< max stored frames, first frame pinned
  /// Multiplier on the squared L2 distance; <= 0 selects 1/sqrt(C_k).
  double similarity_scale = 0.0;

  void validate() const;
  double scale_for(int key_dim) const;
};

/// Row-stochastic affinity: softmax_j(-scale * ||q_i - k_j||^2).
Var compute_affinity(const Var& query, const Var& keys, double scale);
/// Same with scale 1/sqrt(C_k).
Var compute_affinity(const Var& query, const Var& keys);

/// V_t^m = A * V.
Var read_memory(const Var& affinity, const Var& values);

/// P = V_m * U + V_prev * (1 - U), U broadcast across channels.
/// change_prob: [N,tokens,1] (or [tokens,1]).
Var fuse_memory(const Var& queried, const Var& last_values, const Var& change_prob);

/// Ground-truth change tokens: |prev - cur| >= delta for matting data,
/// |prev - cur| > delta for segmentation data, area-downsampled by `factor`
/// and re-binarized at > 0. Inputs [N,1,H,W]; output [N,1,H/f,W/f].
Tensor ground_truth_change_mask(const Tensor& prev, const Tensor& cur, double delta, DataKind kind, int factor = 16);

/// Default delta per data kind (0.001 matting, 0 segmentation).
double default_change_delta(DataKind kind);

struct MemoryFrame {
  int frame_index = 0;
  Var key;    // [N,HW,C_k]
  Var value;  // [N,HW,C_v]
};

class MemoryBank {
 public:
  explicit MemoryBank(MemoryConfig config = {});

  /// Stores (key, value) iff frame_index == 0 or frame_index % r == 0, then
  /// evicts the oldest non-first frame while over capacity. Returns whether
  /// the frame was stored.
  bool update(const Var& key, const Var& value, int frame_index);
  bool should_store(int frame_index) const;

  Var keys() const;    ///< [N, T_m*HW, C_k]
  Var values() const;  ///< [N, T_m*HW, C_v]

  std::vector<int> frame_indices() const;
  int size() const { return static_cast<int>(frames_.size()); }
  bool empty() const { return frames_.empty(); }
  const MemoryConfig& config() const { return config_; }
  const std::vector<MemoryFrame>& frames() const { return frames_; }
  void clear() { frames_.clear(); }

 private:
  MemoryConfig config_;
  std::vector<MemoryFrame> frames_;
};

/// Functional form of MemoryBank::update.
MemoryBank update_bank(MemoryBank bank, const Var& key, const Var& value, int frame_index);

/// Previous-frame state, refreshed every frame.
struct LastFrameMemory {
  Var key;    // [N,C_k,H',W']
  Var value;  // [N,HW,C_v]
  Var alpha;  // [N,1,H,W]
};

}  // namespace memprop::memory

// SPDX-License-Identifier: Apache-2.0
#include "memprop/memory.hpp"

#include <cmath>

namespace memprop::memory {

namespace {

Var as_batched(const Var& v) {
  if (v.value().rank() == 2) return ag::reshape(v, {1, v.dim(0), v.dim(1)});
  if (v.value().rank() != 3) throw ShapeError("expected token tensor, got " + shape_str(v.shape()));
  return v;
}

Var unbatch_like(const Var& out, const Var& ref) {
  if (ref.value().rank() == 2) return ag::reshape(out, {out.dim(1), out.dim(2)});
  return out;
}

}  // namespace

void MemoryConfig::validate() const {
  if (update_interval < 1) throw ConfigError("memory.update_interval must be >= 1");
  if (capacity < 1) throw ConfigError("memory.capacity must be >= 1");
}

double MemoryConfig::scale_for(int key_dim) const {
  return similarity_scale > 0.0 ? similarity_scale : 1.0 / std::sqrt(static_cast<double>(key_dim));
}

Var compute_affinity(const Var& query, const Var& keys, double scale) {
  Var q = as_batched(query);
  Var k = as_batched(keys);
  if (k.dim(1) == 0) throw EmptyMemoryError("compute_affinity: memory holds no tokens");
  if (q.dim(2) != k.dim(2)) {
    throw ShapeError("compute_affinity: key dims differ " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  }
  if (!k.value().all_finite() || !q.value().all_finite()) throw InputError("compute_affinity: non-finite keys");
  return unbatch_like(ag::softmax_last(ag::neg_sq_dist(q, k, scale)), query);
}

Var compute_affinity(const Var& query, const Var& keys) {
  return compute_affinity(query, keys, 1.0 / std::sqrt(static_cast<double>(query.dim(-1))));
}

Var read_memory(const Var& affinity, const Var& values) {
  Var a = as_batched(affinity);
  Var v = as_batched(values);
  if (a.dim(2) != v.dim(1) || a.dim(0) != v.dim(0)) {
    throw ShapeError("read_memory: affinity " + shape_str(a.shape()) + " vs values " + shape_str(v.shape()));
  }
  return unbatch_like(ag::bmm(a, v), affinity);
}

Var fuse_memory(const Var& queried, const Var& last_values, const Var& change_prob) {
  require_same_shape(queried.value(), last_values.value(), "fuse_memory");
  const Shape& s = queried.shape();
  Shape expect = s;
  expect.back() = 1;
  if (change_prob.shape() != expect) {
    throw ShapeError("fuse_memory: change map " + shape_str(change_prob.shape()) + " does not match tokens " + shape_str(s));
  }
  for (double u : change_prob.value().values()) {
    if (!(u >= 0.0 && u <= 1.0)) throw InputError("fuse_memory: change probability outside [0,1]");
  }
  return ag::add(ag::mul_bcast(queried, change_prob), ag::mul_bcast(last_values, ag::one_minus(change_prob)));
}

double default_change_delta(DataKind kind) { return kind == DataKind::Matting ? 0.001 : 0.0; }

Tensor ground_truth_change_mask(const Tensor& prev, const Tensor& cur, double delta, DataKind kind, int factor) {
  require_same_shape(prev, cur, "ground_truth_change_mask");
  if (delta < 0.0) throw ConfigError("change delta must be >= 0");
  if (prev.rank() != 4) throw ShapeError("ground_truth_change_mask expects [N,1,H,W]");
  const int n = prev.dim(0), c = prev.dim(1), h = prev.dim(2), w = prev.dim(3);
  if (h % factor != 0 || w % factor != 0) throw ShapeError("ground_truth_change_mask: size not divisible by factor");
  const int ho = h / factor, wo = w / factor;
  Tensor out({n, c, ho, wo});
  const bool strict = kind == DataKind::Segmentation;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double d = std::abs(prev.at(b, ch, y, x) - cur.at(b, ch, y, x));
          const bool changed = strict ? d > delta : d >= delta;
          // Area mean > 0 is the same as "any changed pixel in the cell".
          if (changed) out.at(b, ch, y / factor, x / factor) = 1.0;
        }
      }
    }
  }
  return out;
}

MemoryBank::MemoryBank(MemoryConfig config) : config_(config) { config_.validate(); }

bool MemoryBank::should_store(int frame_index) const {
  if (frame_index < 0) throw InputError("frame_index must be >= 0");
  return frame_index == 0 || frame_index % config_.update_interval == 0;
}

bool MemoryBank::update(const Var& key, const Var& value, int frame_index) {
  if (!should_store(frame_index)) return false;
  if (key.value().rank() != 3 || value.value().rank() != 3 || key.dim(0) != value.dim(0) || key.dim(1) != value.dim(1)) {
    throw ShapeError("update_bank: key " + shape_str(key.shape()) + " and value " + shape_str(value.shape()) +
                     " token counts differ");
  }
  if (!frames_.empty()) {
    const auto& ref = frames_.front();
    if (key.shape() != ref.key.shape() || value.shape() != ref.value.shape()) {
      throw ShapeError("update_bank: token layout changed between frames");
    }
  }
  frames_.push_back({frame_index, key, value});
  while (static_cast<int>(frames_.size()) > config_.capacity && frames_.size() > 1) {
    frames_.erase(frames_.begin() + 1);
  }
  return true;
}

Var MemoryBank::keys() const {
  if (frames_.empty()) throw EmptyMemoryError("memory bank is empty");
  std::vector<Var> parts;
  for (const auto& f : frames_) parts.push_back(f.key);
  return parts.size() == 1 ? parts[0] : ag::concat(std::span<const Var>(parts), 1);
}

Var MemoryBank::values() const {
  if (frames_.empty()) throw EmptyMemoryError("memory bank is empty");
  std::vector<Var> parts;
  for (const auto& f : frames_) parts.push_back(f.value);
  return parts.size() == 1 ? parts[0] : ag::concat(std::span<const Var>(parts), 1);
}

std::vector<int> MemoryBank::frame_indices() const {
  std::vector<int> out;
  for (const auto& f : frames_) out.push_back(f.frame_index);
  return out;
}

MemoryBank update_bank(MemoryBank bank, const Var& key, const Var& value, int frame_index) {
  bank.update(key, value, frame_index);
  return bank;
}

}  // namespace memprop::memory

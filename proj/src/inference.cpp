// SPDX-License-Identifier: Apache-2.0
#include "memprop/inference.hpp"

namespace memprop::inference {

Propagator::Propagator(const MattingModel& model, memory::MemoryConfig memory) : model_(model), bank_(memory) {}

StepResult Propagator::run_first(const FeaturePyramid& pyr, const Var& frame, const Var& guidance, bool with_segmentation) {
  const Var key = ag::to_tokens(pyr.key);
  const Var vg = model_.encode_value(pyr, frame, guidance);
  StepResult r;
  r.queried = memory::read_memory(memory::compute_affinity(key, key, bank_.config().scale_for(key.dim(2))), vg);
  r.readout = r.queried;  // U = 1: nothing to fall back on yet
  const DecodeOutput dec = model_.decode_alpha(model_.object_fusion(r.readout, vg), pyr, with_segmentation);
  r.alpha = dec.alpha;
  r.seg_logits = dec.seg_logits;
  last_ = {pyr.key, vg, guidance};
  return r;
}

StepResult Propagator::start(const Var& frame, const Var& guidance, int iterations, bool with_segmentation,
                             std::vector<Tensor>* per_iteration) {
  if (iterations < 1) throw ConfigError("warm-up iterations must be >= 1");
  if (next_index_ != 0) throw std::logic_error("Propagator::start called twice");
  if (guidance.value().rank() != 4 || guidance.dim(1) != 1 || guidance.dim(0) != frame.dim(0) ||
      guidance.dim(2) != frame.dim(2) || guidance.dim(3) != frame.dim(3)) {
    throw ShapeError("guidance mask " + shape_str(guidance.shape()) + " does not match frame " + shape_str(frame.shape()));
  }
  const FeaturePyramid pyr = model_.encode_frame(frame);
  Var g = guidance;
  StepResult r;
  for (int i = 0; i < iterations; ++i) {
    r = run_first(pyr, frame, g, with_segmentation);
    if (per_iteration) per_iteration->push_back(r.alpha.value());
    g = r.alpha.detach();
  }
  // Seed the bank with the refined matte.
  const Var v0 = model_.encode_value(pyr, frame, r.alpha.detach());
  bank_.update(ag::to_tokens(pyr.key), v0, 0);
  last_ = {pyr.key, v0, r.alpha.detach()};
  guidance_tokens_ = v0;
  next_index_ = 1;
  return r;
}

StepResult Propagator::step(const Var& frame, bool with_segmentation) {
  if (next_index_ == 0) throw std::logic_error("Propagator::step before start");
  const FeaturePyramid pyr = model_.encode_frame(frame);
  const Var key = ag::to_tokens(pyr.key);
  StepResult r;
  const Var aff = memory::compute_affinity(key, bank_.keys(), bank_.config().scale_for(key.dim(2)));
  r.queried = memory::read_memory(aff, bank_.values());
  const ChangeOutput chg = model_.predict_change_probability(pyr.key, last_.key, last_.alpha);
  r.change_logits = chg.logits;
  r.change_prob = ag::to_tokens(chg.prob);
  if (forced_u_) {
    Tensor u = Tensor::zeros(r.change_prob.shape());
    u.fill(*forced_u_);
    r.change_prob = ag::constant(std::move(u));
  }
  r.last_value = last_.value;
  r.readout = memory::fuse_memory(r.queried, r.last_value, r.change_prob);
  const DecodeOutput dec = model_.decode_alpha(model_.object_fusion(r.readout, guidance_tokens_), pyr, with_segmentation);
  r.alpha = dec.alpha;
  r.seg_logits = dec.seg_logits;
  const Var alpha_in = r.alpha.detach();
  const Var v = model_.encode_value(pyr, frame, alpha_in);
  last_ = {pyr.key, v, alpha_in};
  bank_.update(key, v, next_index_);
  ++next_index_;
  return r;
}

void InferenceConfig::validate() const {
  if (warmup_iters < 1) throw ConfigError("warmup_iters must be >= 1");
  memory.validate();
}

namespace {

void check_first_mask(const VideoClip& clip, const Tensor& mask) {
  if (mask.rank() != 4 || mask.dim(0) != 1 || mask.dim(1) != 1 || mask.dim(2) != clip.height() ||
      mask.dim(3) != clip.width()) {
    throw ShapeError("first-frame mask " + shape_str(mask.shape()) + " does not match clip " +
                     shape_str(clip.frames.shape()));
  }
  if (mask.min() < 0.0 || mask.max() > 1.0) throw InputError("first-frame mask outside [0,1]");
  if (mask.sum() == 0.0) throw InputError("first-frame mask is empty: no target selected");
}

}  // namespace

AlphaSequence propagate(const VideoClip& clip, const Tensor& first_mask, const MattingModel& model,
                        const InferenceConfig& cfg, const FrameHook& hook, std::optional<double> forced_change) {
  cfg.validate();
  clip.validate();
  check_first_mask(clip, first_mask);
  NoGradGuard no_grad;
  Propagator prop(model, cfg.memory);
  prop.force_change_probability(forced_change);
  AlphaSequence out;
  out.alpha = Tensor({clip.length(), 1, clip.height(), clip.width()});
  for (int t = 0; t < clip.length(); ++t) {
    const Var frame = ag::constant(clip.frame(t));
    const StepResult r = t == 0 ? prop.start(frame, ag::constant(first_mask), cfg.warmup_iters, false) : prop.step(frame, false);
    if (hook) hook(t, r);
    out.alpha.set_slice0(t, r.alpha.value());
  }
  out.clamp();
  return out;
}

WarmupResult warmup_first_frame(const Tensor& frame, const Tensor& first_mask, const MattingModel& model, int n,
                                memory::MemoryConfig memory) {
  if (n < 1) throw ConfigError("warm-up iterations must be >= 1");
  VideoClip clip{frame, 25.0};
  clip.validate();
  check_first_mask(clip, first_mask);
  NoGradGuard no_grad;
  Propagator prop(model, memory);
  WarmupResult out;
  out.alpha = prop.start(ag::constant(frame), ag::constant(first_mask), n, false, &out.iterations).alpha.value();
  return out;
}

}  // namespace memprop::inference

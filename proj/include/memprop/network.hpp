// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale matting network. Small strided conv stacks stand in for the
// usual pretrained backbones; a plain token self-attention stack stands in
// for the object transformer.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "memprop/autograd.hpp"
#include "memprop/core_types.hpp"

namespace memprop {

struct ModelConfig {
  std::array<int, 5> encoder_widths{16, 32, 64, 96, 128};  // x1, x2, x4, x8, x16
  int key_dim = 32;
  int value_dim = 64;
  std::array<int, 4> value_widths{16, 32, 32, 32};  // value encoder at x2..x16
  int change_hidden = 32;
  int fusion_blocks = 3;
  int fusion_hidden = 128;
  std::array<int, 5> decoder_widths{64, 48, 32, 16, 16};  // x16, x8, x4, x2, x1

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct FeaturePyramid {
  Var f1, f2, f4, f8, f16;
  Var key;  // [N,C_k,H/16,W/16]
  int height = 0;
  int width = 0;
  int token_h() const { return height / 16; }
  int token_w() const { return width / 16; }
};

struct ChangeOutput {
  Var logits;  // [N,1,H',W']
  Var prob;    // sigmoid(logits)
};

struct DecodeOutput {
  Var alpha;       // [N,1,H,W], in [0,1]
  Var seg_logits;  // [N,1,H,W]; undefined unless requested
};

struct Conv {
  Var w, b;
  int stride = 1;
  int pad = 0;
  Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct Linear {
  Var w, b;
  Var operator()(const Var& x) const { return ag::linear(x, w, b); }
};

struct FusionBlock {
  Linear q, k, v, o, ff1, ff2;
};

class MattingModel {
 public:
  /// Number of x2 upsampling stages between the token grid and full resolution.
  static constexpr int kUpsamplingStages = 4;

  explicit MattingModel(ModelConfig config = {}, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }

  /// frame: [N,3,H,W] with H,W divisible by 16.
  FeaturePyramid encode_frame(const Var& frame) const;

  /// Change head over concat(K_t, K_{t-1}, area-pooled M_{t-1}).
  ChangeOutput predict_change_probability(const Var& key, const Var& prev_key, const Var& prev_alpha) const;

  /// Token self-attention over the readout; keys and values also attend over
  /// `guidance` (first-frame value tokens). `attention_out` receives the
  /// normalized attention of every block when non-null.
  Var object_fusion(const Var& readout, const Var& guidance, std::vector<Tensor>* attention_out = nullptr) const;

  DecodeOutput decode_alpha(const Var& fused, const FeaturePyramid& pyramid, bool with_segmentation) const;

  /// Value tokens [N,H'W',C_v] from frame features and an alpha matte.
  Var encode_value(const FeaturePyramid& pyramid, const Var& frame, const Var& alpha) const;

  using ParamVisitor = std::function<void(const std::string& name, Var& param)>;
  using ConstParamVisitor = std::function<void(const std::string& name, const Var& param)>;
  /// Visits parameters in a fixed order (the checkpoint order).
  void for_each_parameter(const ParamVisitor& fn);
  void for_each_parameter(const ConstParamVisitor& fn) const;
  std::vector<Var> parameters() const;
  std::size_t parameter_count() const;
  /// Parameters of the alpha head's last convolution.
  std::vector<Var> alpha_head_parameters() const;

 private:
  ModelConfig config_;
  // encoder
  Conv enc1_, enc2_, enc4_, enc8_, enc16_, key_proj_;
  // change head
  Conv chg1_, chg2_, chg3_;
  // fusion
  std::vector<FusionBlock> fusion_;
  // decoder
  Conv dec16_, dec8_, dec4_, dec2_, dec1_, alpha_out_;
  Conv seg1_, seg_out_;
  // value encoder
  Conv val2_, val4_, val8_, val16_, val_proj_;
};

}  // namespace memprop

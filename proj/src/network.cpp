// SPDX-License-Identifier: Apache-2.0
#include "memprop/network.hpp"

#include <cmath>
#include <random>

namespace memprop {

using nlohmann::json;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("model.") + what + " must be >= 1");
  };
  for (int w : encoder_widths) positive(w, "encoder_widths");
  for (int w : value_widths) positive(w, "value_widths");
  for (int w : decoder_widths) positive(w, "decoder_widths");
  positive(key_dim, "key_dim");
  positive(value_dim, "value_dim");
  positive(change_hidden, "change_hidden");
  positive(fusion_hidden, "fusion_hidden");
  if (fusion_blocks < 0) throw ConfigError("model.fusion_blocks must be >= 0");
}

json ModelConfig::to_json() const {
  return {{"encoder_widths", encoder_widths}, {"key_dim", key_dim},           {"value_dim", value_dim},
          {"value_widths", value_widths},     {"change_hidden", change_hidden}, {"fusion_blocks", fusion_blocks},
          {"fusion_hidden", fusion_hidden},   {"decoder_widths", decoder_widths}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (!j.is_object()) throw ConfigError("model: expected an object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "encoder_widths") c.encoder_widths = it->get<std::array<int, 5>>();
      else if (k == "key_dim") c.key_dim = it->get<int>();
      else if (k == "value_dim") c.value_dim = it->get<int>();
      else if (k == "value_widths") c.value_widths = it->get<std::array<int, 4>>();
      else if (k == "change_hidden") c.change_hidden = it->get<int>();
      else if (k == "fusion_blocks") c.fusion_blocks = it->get<int>();
      else if (k == "fusion_hidden") c.fusion_hidden = it->get<int>();
      else if (k == "decoder_widths") c.decoder_widths = it->get<std::array<int, 5>>();
      else throw ConfigError("model." + k + ": unknown field");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  Conv conv(int ci, int co, int k, int stride, double gain) {
    Tensor w({co, ci, k, k});
    const double std = gain / std::sqrt(static_cast<double>(ci * k * k));
    fill(w, std);
    return Conv{ag::parameter(std::move(w)), ag::parameter(Tensor::zeros({co})), stride, k / 2};
  }

  Linear linear(int ci, int co, double gain) {
    Tensor w({ci, co});
    fill(w, gain / std::sqrt(static_cast<double>(ci)));
    return Linear{ag::parameter(std::move(w)), ag::parameter(Tensor::zeros({co}))};
  }

 private:
  void fill(Tensor& t, double std) {
    if (std == 0.0) return;
    std::normal_distribution<double> nd(0.0, std);
    for (double& v : t.values()) v = nd(rng_);
  }
  std::mt19937_64 rng_;
};

constexpr double kRelu = 1.4142135623730951;

Var relu_conv(const Conv& c, const Var& x) { return ag::relu(c(x)); }

}  // namespace

MattingModel::MattingModel(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Init init(seed);
  const auto& e = config_.encoder_widths;
  const auto& v = config_.value_widths;
  const auto& d = config_.decoder_widths;
  const int ck = config_.key_dim, cv = config_.value_dim;

  enc1_ = init.conv(3, e[0], 3, 1, kRelu);
  enc2_ = init.conv(e[0], e[1], 3, 2, kRelu);
  enc4_ = init.conv(e[1], e[2], 3, 2, kRelu);
  enc8_ = init.conv(e[2], e[3], 3, 2, kRelu);
  enc16_ = init.conv(e[3], e[4], 3, 2, kRelu);
  key_proj_ = init.conv(e[4], ck, 1, 1, 1.0);

  chg1_ = init.conv(2 * ck + 1, config_.change_hidden, 1, 1, kRelu);
  chg2_ = init.conv(config_.change_hidden, config_.change_hidden, 3, 1, kRelu);
  chg3_ = init.conv(config_.change_hidden, 1, 3, 1, 1.0);

  for (int i = 0; i < config_.fusion_blocks; ++i) {
    FusionBlock b;
    b.q = init.linear(cv, cv, 1.0);
    b.k = init.linear(cv, cv, 1.0);
    b.v = init.linear(cv, cv, 1.0);
    b.o = init.linear(cv, cv, 0.0);  // zero: each block starts as identity
    b.ff1 = init.linear(cv, config_.fusion_hidden, kRelu);
    b.ff2 = init.linear(config_.fusion_hidden, cv, 0.0);
    fusion_.push_back(std::move(b));
  }

  dec16_ = init.conv(cv + e[4], d[0], 3, 1, kRelu);
  dec8_ = init.conv(d[0] + e[3], d[1], 3, 1, kRelu);
  dec4_ = init.conv(d[1] + e[2], d[2], 3, 1, kRelu);
  dec2_ = init.conv(d[2] + e[1], d[3], 3, 1, kRelu);
  dec1_ = init.conv(d[3] + e[0], d[4], 3, 1, kRelu);
  alpha_out_ = init.conv(d[4], 1, 3, 1, 1.0);
  seg1_ = init.conv(d[3] + e[0], d[4], 3, 1, kRelu);
  seg_out_ = init.conv(d[4], 1, 3, 1, 1.0);

  val2_ = init.conv(4, v[0], 3, 2, kRelu);
  val4_ = init.conv(v[0], v[1], 3, 2, kRelu);
  val8_ = init.conv(v[1], v[2], 3, 2, kRelu);
  val16_ = init.conv(v[2], v[3], 3, 2, kRelu);
  val_proj_ = init.conv(v[3] + e[4], cv, 1, 1, 1.0);
}

FeaturePyramid MattingModel::encode_frame(const Var& frame) const {
  if (frame.value().rank() != 4 || frame.dim(1) != 3) {
    throw ShapeError("encode_frame expects [N,3,H,W], got " + shape_str(frame.shape()));
  }
  if (frame.dim(2) % 16 != 0 || frame.dim(3) % 16 != 0 || frame.dim(2) == 0 || frame.dim(3) == 0) {
    throw ShapeError("encode_frame: H and W must be positive multiples of 16, got " + shape_str(frame.shape()));
  }
  FeaturePyramid p;
  p.height = frame.dim(2);
  p.width = frame.dim(3);
  p.f1 = relu_conv(enc1_, frame);
  p.f2 = relu_conv(enc2_, p.f1);
  p.f4 = relu_conv(enc4_, p.f2);
  p.f8 = relu_conv(enc8_, p.f4);
  p.f16 = relu_conv(enc16_, p.f8);
  p.key = key_proj_(p.f16);
  return p;
}

ChangeOutput MattingModel::predict_change_probability(const Var& key, const Var& prev_key, const Var& prev_alpha) const {
  if (key.shape() != prev_key.shape()) {
    throw ShapeError("predict_change_probability: key maps differ " + shape_str(key.shape()) + " vs " +
                     shape_str(prev_key.shape()));
  }
  if (prev_alpha.value().rank() != 4 || prev_alpha.dim(1) != 1 || prev_alpha.dim(0) != key.dim(0) ||
      prev_alpha.dim(2) != 16 * key.dim(2) || prev_alpha.dim(3) != 16 * key.dim(3)) {
    throw ShapeError("predict_change_probability: alpha " + shape_str(prev_alpha.shape()) + " does not match key grid");
  }
  Var x = ag::concat({key, prev_key, ag::avg_pool(prev_alpha, 16)}, 1);
  x = relu_conv(chg1_, x);
  x = relu_conv(chg2_, x);
  ChangeOutput out;
  out.logits = chg3_(x);
  out.prob = ag::sigmoid(out.logits);
  return out;
}

Var MattingModel::object_fusion(const Var& readout, const Var& guidance, std::vector<Tensor>* attention_out) const {
  if (readout.value().rank() != 3 || readout.dim(2) != config_.value_dim) {
    throw ShapeError("object_fusion: readout must be [N,T," + std::to_string(config_.value_dim) + "], got " +
                     shape_str(readout.shape()));
  }
  if (guidance.defined() && (guidance.value().rank() != 3 || guidance.dim(0) != readout.dim(0) ||
                             guidance.dim(2) != readout.dim(2))) {
    throw ShapeError("object_fusion: guidance " + shape_str(guidance.shape()) + " incompatible with readout");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config_.value_dim));
  Var x = readout;
  for (const auto& b : fusion_) {
    Var ctx = guidance.defined() ? ag::concat({x, guidance}, 1) : x;
    Var attn = ag::softmax_last(ag::scale(ag::bmm_nt(b.q(x), b.k(ctx)), inv_sqrt));
    if (attention_out) attention_out->push_back(attn.value());
    x = ag::add(x, b.o(ag::bmm(attn, b.v(ctx))));
    x = ag::add(x, b.ff2(ag::relu(b.ff1(x))));
  }
  return x;
}

DecodeOutput MattingModel::decode_alpha(const Var& fused, const FeaturePyramid& p, bool with_segmentation) const {
  for (const Var* f : {&p.f1, &p.f2, &p.f4, &p.f8, &p.f16}) {
    if (!f->defined()) throw ShapeError("decode_alpha: missing skip level");
  }
  const int th = p.f16.dim(2), tw = p.f16.dim(3);
  if (fused.value().rank() != 3 || fused.dim(1) != th * tw || fused.dim(2) != config_.value_dim) {
    throw ShapeError("decode_alpha: fused tokens " + shape_str(fused.shape()) + " do not match the key grid");
  }
  Var x = relu_conv(dec16_, ag::concat({ag::from_tokens(fused, th, tw), p.f16}, 1));
  x = relu_conv(dec8_, ag::concat({ag::upsample_bilinear2x(x), p.f8}, 1));
  x = relu_conv(dec4_, ag::concat({ag::upsample_bilinear2x(x), p.f4}, 1));
  x = relu_conv(dec2_, ag::concat({ag::upsample_bilinear2x(x), p.f2}, 1));
  Var top = ag::concat({ag::upsample_bilinear2x(x), p.f1}, 1);
  DecodeOutput out;
  out.alpha = ag::sigmoid(alpha_out_(relu_conv(dec1_, top)));
  if (with_segmentation) out.seg_logits = seg_out_(relu_conv(seg1_, top));
  return out;
}

Var MattingModel::encode_value(const FeaturePyramid& p, const Var& frame, const Var& alpha) const {
  if (alpha.value().rank() != 4 || alpha.dim(1) != 1 || alpha.dim(0) != frame.dim(0) || alpha.dim(2) != frame.dim(2) ||
      alpha.dim(3) != frame.dim(3)) {
    throw ShapeError("encode_value: alpha " + shape_str(alpha.shape()) + " does not match frame " +
                     shape_str(frame.shape()));
  }
  if (alpha.value().min() < 0.0 || alpha.value().max() > 1.0) throw InputError("encode_value: alpha outside [0,1]");
  Var x = relu_conv(val2_, ag::concat({frame, alpha}, 1));
  x = relu_conv(val4_, x);
  x = relu_conv(val8_, x);
  x = relu_conv(val16_, x);
  return ag::to_tokens(val_proj_(ag::concat({x, p.f16}, 1)));
}

void MattingModel::for_each_parameter(const ParamVisitor& fn) {
  auto conv = [&](const std::string& name, Conv& c) {
    fn(name + ".weight", c.w);
    fn(name + ".bias", c.b);
  };
  auto lin = [&](const std::string& name, Linear& l) {
    fn(name + ".weight", l.w);
    fn(name + ".bias", l.b);
  };
  conv("encoder.conv1", enc1_);
  conv("encoder.conv2", enc2_);
  conv("encoder.conv4", enc4_);
  conv("encoder.conv8", enc8_);
  conv("encoder.conv16", enc16_);
  conv("encoder.key_proj", key_proj_);
  conv("change.conv1", chg1_);
  conv("change.conv2", chg2_);
  conv("change.conv3", chg3_);
  for (std::size_t i = 0; i < fusion_.size(); ++i) {
    const std::string p = "fusion." + std::to_string(i) + ".";
    lin(p + "q", fusion_[i].q);
    lin(p + "k", fusion_[i].k);
    lin(p + "v", fusion_[i].v);
    lin(p + "o", fusion_[i].o);
    lin(p + "ff1", fusion_[i].ff1);
    lin(p + "ff2", fusion_[i].ff2);
  }
  conv("decoder.conv16", dec16_);
  conv("decoder.conv8", dec8_);
  conv("decoder.conv4", dec4_);
  conv("decoder.conv2", dec2_);
  conv("decoder.conv1", dec1_);
  conv("decoder.alpha_out", alpha_out_);
  conv("decoder.seg_conv1", seg1_);
  conv("decoder.seg_out", seg_out_);
  conv("value.conv2", val2_);
  conv("value.conv4", val4_);
  conv("value.conv8", val8_);
  conv("value.conv16", val16_);
  conv("value.proj", val_proj_);
}

void MattingModel::for_each_parameter(const ConstParamVisitor& fn) const {
  const_cast<MattingModel*>(this)->for_each_parameter([&](const std::string& n, Var& v) { fn(n, v); });
}

std::vector<Var> MattingModel::parameters() const {
  std::vector<Var> out;
  for_each_parameter([&](const std::string&, const Var& v) { out.push_back(v); });
  return out;
}

std::size_t MattingModel::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, const Var& v) { n += v.value().numel(); });
  return n;
}

std::vector<Var> MattingModel::alpha_head_parameters() const { return {alpha_out_.w, alpha_out_.b}; }

}  // namespace memprop

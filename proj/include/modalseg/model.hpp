#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/ops.hpp"
#include "modalseg/params.hpp"
#include "modalseg/rng.hpp"
#include "modalseg/tensor.hpp"

// Channel-separate-encoder U-Net.
//
// Every input channel has its own encoder. Encoder block b runs at resolution
// H/2^b: a 3x3 stride-1 convolution (its output is a skip feature) followed by
// a 3x3 stride-2 convolution. Feature level i of a channel lives at resolution
// H/2^(L-i): level 0 is the deepest encoder output, level i >= 1 is the skip
// output of block L-i.
//
// The decoder fuses channels only by summation of per-channel bias-free
// convolutions:
//   f_0 = sum_{c available} W0_c * level0_c
//   f_i = act( sum_{c available} Wskip_{i,c} * level_i_c + Up_i(act(f_{i-1})) ),  i = 1..L
// and stage i has a 1x1 softmax head. A missing channel therefore contributes
// exactly zero, which is what makes masked inference well defined.

namespace modalseg {

struct ModelConfig {
  int channels = 4;
  int classes = 4;
  int height = 64;
  int width = 64;
  int levels = 3;
  std::vector<int> encoder_widths{16, 32, 64};
  int bottleneck_width = 64;
  std::vector<int> decoder_widths;  // one per stage; empty derives them from encoder_widths
  ops::Activation activation;
  std::uint64_t seed = 0;

  void validate() const {
    if (channels < 1 || classes < 2) throw ConfigError("model: need at least 1 channel and 2 classes");
    if (levels < 1 || levels > 8) throw ConfigError("model: levels must be in [1, 8]");
    if (static_cast<int>(encoder_widths.size()) != levels)
      throw ConfigError("model: encoder_widths needs one entry per level");
    if (!decoder_widths.empty() && static_cast<int>(decoder_widths.size()) != levels)
      throw ConfigError("model: decoder_widths needs one entry per stage");
    for (int v : encoder_widths)
      if (v <= 0) throw ConfigError("model: widths must be positive");
    for (int v : decoder_widths)
      if (v <= 0) throw ConfigError("model: widths must be positive");
    if (bottleneck_width <= 0) throw ConfigError("model: widths must be positive");
    const int div = 1 << levels;
    if (height <= 0 || width <= 0 || height % div != 0 || width % div != 0)
      throw ConfigError("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by 2^levels = " + std::to_string(div));
    if (!(activation.slope >= 0.0 && activation.slope < 1.0))
      throw ConfigError("model: leaky slope must be in [0, 1)");
  }

  /// Output width of decoder stage i (1..L).
  int stage_width(int i) const {
    if (!decoder_widths.empty()) return decoder_widths[i - 1];
    return encoder_widths[std::max(levels - i - 1, 0)];
  }
  /// Feature count of encoder level i (0..L).
  int level_width(int i) const { return i == 0 ? encoder_widths[levels - 1] : encoder_widths[levels - i]; }
  int level_height(int i) const { return height >> (levels - i); }
  int level_width_px(int i) const { return width >> (levels - i); }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.channels == b.channels && a.classes == b.classes && a.height == b.height && a.width == b.width &&
           a.levels == b.levels && a.encoder_widths == b.encoder_widths && a.bottleneck_width == b.bottleneck_width &&
           a.decoder_widths == b.decoder_widths && a.activation.kind == b.activation.kind &&
           a.activation.slope == b.activation.slope && a.seed == b.seed;
  }
};

inline json to_json_value(const ops::Activation& a) {
  return a.kind == ops::ActivationKind::tanh ? json("tanh") : json("leaky_relu");
}

inline void to_json(json& j, const ModelConfig& m) {
  j = {{"channels", m.channels},
       {"classes", m.classes},
       {"height", m.height},
       {"width", m.width},
       {"levels", m.levels},
       {"encoder_widths", m.encoder_widths},
       {"bottleneck_width", m.bottleneck_width},
       {"decoder_widths", m.decoder_widths},
       {"activation", to_json_value(m.activation)},
       {"leaky_slope", m.activation.slope},
       {"seed", m.seed}};
}

inline void from_json(const json& j, ModelConfig& m) {
  constexpr std::string_view s = "model";
  reject_unknown_keys(j, {"channels", "classes", "height", "width", "levels", "encoder_widths", "bottleneck_width",
                          "decoder_widths", "activation", "leaky_slope", "seed"},
                      s);
  read_optional(j, "channels", m.channels, s);
  read_optional(j, "classes", m.classes, s);
  read_optional(j, "height", m.height, s);
  read_optional(j, "width", m.width, s);
  read_optional(j, "levels", m.levels, s);
  read_optional(j, "encoder_widths", m.encoder_widths, s);
  read_optional(j, "bottleneck_width", m.bottleneck_width, s);
  read_optional(j, "decoder_widths", m.decoder_widths, s);
  read_optional(j, "leaky_slope", m.activation.slope, s);
  read_optional(j, "seed", m.seed, s);
  std::string act = m.activation.kind == ops::ActivationKind::tanh ? "tanh" : "leaky_relu";
  read_optional(j, "activation", act, s);
  if (act == "leaky_relu") {
    m.activation.kind = ops::ActivationKind::leaky_relu;
  } else if (act == "tanh") {
    m.activation.kind = ops::ActivationKind::tanh;
  } else {
    throw ConfigError("model.activation: expected \"leaky_relu\" or \"tanh\"");
  }
}

/// Slot indices of every parameter block, in canonical checkpoint order:
/// encoders (channel-major, then block: conv w, conv b, down w, down b),
/// bottleneck fusion kernels per channel, then per stage: skip kernels per
/// channel, upsampling kernel and bias, head kernel and bias.
struct ModelLayout {
  struct Block {
    std::size_t conv_w, conv_b, down_w, down_b;
  };
  ParamLayout params;
  std::vector<std::vector<Block>> encoder;  // [channel][block]
  std::vector<std::size_t> fuse;            // [channel]
  std::vector<std::vector<std::size_t>> skip;  // [stage-1][channel]
  std::vector<std::size_t> up_w, up_b, head_w, head_b;  // [stage-1]
};

inline ModelLayout make_layout(const ModelConfig& cfg) {
  cfg.validate();
  ModelLayout m;
  const int L = cfg.levels;
  m.encoder.resize(cfg.channels);
  for (int c = 0; c < cfg.channels; ++c) {
    int in = 1;
    for (int b = 0; b < L; ++b) {
      const int w = cfg.encoder_widths[b];
      const std::string p = "enc.c" + std::to_string(c) + ".b" + std::to_string(b);
      ModelLayout::Block blk{};
      blk.conv_w = m.params.add(p + ".conv.w", w, in * 9);
      blk.conv_b = m.params.add(p + ".conv.b", w, 1);
      blk.down_w = m.params.add(p + ".down.w", w, w * 9);
      blk.down_b = m.params.add(p + ".down.b", w, 1);
      m.encoder[c].push_back(blk);
      in = w;
    }
  }
  for (int c = 0; c < cfg.channels; ++c)
    m.fuse.push_back(m.params.add("fuse.c" + std::to_string(c) + ".w", cfg.bottleneck_width, cfg.level_width(0) * 9));
  int prev = cfg.bottleneck_width;
  for (int i = 1; i <= L; ++i) {
    const int d = cfg.stage_width(i);
    const std::string p = "stage" + std::to_string(i);
    m.skip.emplace_back();
    for (int c = 0; c < cfg.channels; ++c)
      m.skip.back().push_back(m.params.add(p + ".skip.c" + std::to_string(c) + ".w", d, cfg.level_width(i) * 9));
    m.up_w.push_back(m.params.add(p + ".up.w", prev, d * 16));
    m.up_b.push_back(m.params.add(p + ".up.b", d, 1));
    m.head_w.push_back(m.params.add(p + ".head.w", cfg.classes, d));
    m.head_b.push_back(m.params.add(p + ".head.b", cfg.classes, 1));
    prev = d;
  }
  return m;
}

template <class S>
struct ModelParams {
  ModelConfig config;
  ModelLayout layout;
  std::vector<S> values;

  ConstMatMap<S> operator()(std::size_t slot) const {
    return view(std::span<const S>(values), layout.params[slot]);
  }
  const S* ptr(std::size_t slot) const { return values.data() + layout.params[slot].offset; }
  std::size_t size() const { return values.size(); }

  MatMap<S> grad_view(std::span<S> grads, std::size_t slot) const { return view(grads, layout.params[slot]); }
  S* grad_ptr(std::span<S> grads, std::size_t slot) const { return grads.data() + layout.params[slot].offset; }
};

/// Fan-in scaled uniform initialization, deterministic in config.seed. Biases
/// start at zero. Fusion and skip kernels count the summed channels into their
/// fan-in.
template <class S>
ModelParams<S> init_model(const ModelConfig& config) {
  ModelParams<S> p{config, make_layout(config), {}};
  p.values.assign(p.layout.params.total(), S(0));
  Rng rng(derive_seed(config.seed, 0x11));
  auto fill = [&](std::size_t slot, double fan_in) {
    const auto& s = p.layout.params[slot];
    const double bound = std::sqrt(6.0 / fan_in);
    for (std::size_t k = 0; k < s.size(); ++k) p.values[s.offset + k] = static_cast<S>(rng.uniform(-bound, bound));
  };
  const double C = config.channels;
  for (const auto& blocks : p.layout.encoder)
    for (const auto& b : blocks) {
      fill(b.conv_w, p.layout.params[b.conv_w].cols);
      fill(b.down_w, p.layout.params[b.down_w].cols);
    }
  for (auto s : p.layout.fuse) fill(s, C * p.layout.params[s].cols);
  for (int i = 0; i < config.levels; ++i) {
    // A stage is one convolution over the concatenated skip and upsampled inputs.
    const double fan_in = C * p.layout.params[p.layout.skip[i][0]].cols + 4.0 * p.layout.params[p.layout.up_w[i]].rows;
    for (auto s : p.layout.skip[i]) fill(s, fan_in);
    fill(p.layout.up_w[i], fan_in);
    fill(p.layout.head_w[i], p.layout.params[p.layout.head_w[i]].cols);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Encoder

/// Activations of one channel's encoder for a batch; kept for the backward pass.
template <class S>
struct ChannelEncoding {
  bool present = false;
  Tensor<S> input;  // (1, N, H, W)
  std::vector<Tensor<S>> conv_pre, skip, down_pre, down;  // per block
};

template <class S>
struct EncoderFeatures {
  int levels = 0;
  std::vector<ChannelEncoding<S>> channels;
  // [channel][i]: the channel's bias-free 3x3 term in the decoder at level i
  // (i = 0 is its share of f_0). Shared by every mask that keeps the channel.
  std::vector<std::vector<Tensor<S>>> contributions;

  bool has(int c) const { return channels.at(c).present; }

  /// Feature level i (0 = deepest) of channel c.
  const Tensor<S>& level(int c, int i) const {
    const auto& ch = channels.at(c);
    if (!ch.present) throw ConfigError("encoder features for channel " + std::to_string(c) + " were not computed");
    return i == 0 ? ch.down[levels - 1] : ch.skip[levels - i];
  }

  /// Replaces channel c's feature levels by zero maps (backward caches untouched).
  void zero_channel(int c) {
    auto& ch = channels.at(c);
    for (auto& t : ch.skip) t.set_zero();
    for (auto& t : ch.down) t.set_zero();
    for (auto& t : contributions.at(c)) t.set_zero();
  }
};

/// Runs channel c's encoder on a (1, N, H, W) batch.
template <class S>
ChannelEncoding<S> encode_channel(const ModelParams<S>& p, int c, Tensor<S> image) {
  const auto& cfg = p.config;
  if (c < 0 || c >= cfg.channels) throw ShapeError("encode_channel: channel index out of range");
  if (image.c != 1 || image.h != cfg.height || image.w != cfg.width)
    throw ShapeError("encode_channel: expected (1, N, " + std::to_string(cfg.height) + ", " +
                     std::to_string(cfg.width) + ") input");
  ChannelEncoding<S> enc;
  enc.present = true;
  enc.input = std::move(image);
  for (auto* v : {&enc.conv_pre, &enc.skip, &enc.down_pre, &enc.down}) v->reserve(cfg.levels);
  const Tensor<S>* x = &enc.input;
  for (int b = 0; b < cfg.levels; ++b) {
    const auto& blk = p.layout.encoder[c][b];
    enc.conv_pre.push_back(ops::conv2d(*x, p(blk.conv_w), p.ptr(blk.conv_b), ops::conv3x3));
    enc.skip.push_back(ops::activate(enc.conv_pre.back(), cfg.activation));
    enc.down_pre.push_back(ops::conv2d(enc.skip.back(), p(blk.down_w), p.ptr(blk.down_b), ops::down3x3));
    enc.down.push_back(ops::activate(enc.down_pre.back(), cfg.activation));
    x = &enc.down.back();
  }
  return enc;
}

/// Extracts channel c of a (C, N, H, W) batch as (1, N, H, W).
template <class S>
Tensor<S> channel_slice(const Tensor<S>& images, int c) {
  Tensor<S> out(1, images.n, images.h, images.w);
  const std::size_t n = out.size();
  std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(c * n), n, out.data.begin());
  return out;
}

/// Encodes every channel available in mask; other channels stay absent.
template <class S>
EncoderFeatures<S> encode(const ModelParams<S>& p, const Tensor<S>& images, const ChannelMask& mask) {
  if (images.c != p.config.channels) throw ShapeError("encode: image batch has the wrong channel count");
  mask.validate(p.config.channels);
  EncoderFeatures<S> enc;
  enc.levels = p.config.levels;
  enc.channels.resize(p.config.channels);
  enc.contributions.resize(p.config.channels);
  for (int c = 0; c < p.config.channels; ++c) {
    if (!mask[c]) continue;
    enc.channels[c] = encode_channel(p, c, channel_slice(images, c));
    for (int i = 0; i <= p.config.levels; ++i) {
      const std::size_t slot = i == 0 ? p.layout.fuse[c] : p.layout.skip[i - 1][c];
      enc.contributions[c].push_back(ops::conv2d(enc.level(c, i), p(slot), static_cast<const S*>(nullptr), ops::conv3x3));
    }
  }
  return enc;
}

// ---------------------------------------------------------------------------
// Decoder

/// Bottleneck fusion: sum over available channels of the bias-free W0_c * level0_c.
template <class S>
Tensor<S> fuse_bottleneck(const ModelParams<S>& p, const EncoderFeatures<S>& enc, const ChannelMask& mask) {
  const auto& cfg = p.config;
  mask.validate(cfg.channels);
  int n = -1;
  for (int c = 0; c < cfg.channels; ++c)
    if (mask[c]) n = enc.level(c, 0).n;
  Tensor<S> f0(cfg.bottleneck_width, n, cfg.level_height(0), cfg.level_width_px(0));
  for (int c = 0; c < cfg.channels; ++c)
    if (mask[c]) add_into(f0, enc.contributions.at(c).at(0));
  return f0;
}

template <class S>
struct StageFeatures {
  Tensor<S> pre;       // summed skip + upsampled terms
  Tensor<S> features;  // after the nonlinearity
};

/// Decoder stage i (1..L): upsample the previous stage, add the available
/// channels' skip convolutions, apply the nonlinearity.
template <class S>
StageFeatures<S> decode_stage(const ModelParams<S>& p, int i, const Tensor<S>& prev, const EncoderFeatures<S>& enc,
                              const ChannelMask& mask) {
  const auto& cfg = p.config;
  if (i < 1 || i > cfg.levels) throw ShapeError("decode_stage: stage index out of range");
  mask.validate(cfg.channels);
  StageFeatures<S> out;
  out.pre = ops::upsample2x(prev, p(p.layout.up_w[i - 1]), p.ptr(p.layout.up_b[i - 1]));
  for (int c = 0; c < cfg.channels; ++c) {
    if (!mask[c]) continue;
    const auto& skip = enc.level(c, i);
    if (skip.h != out.pre.h || skip.w != out.pre.w || skip.n != out.pre.n)
      throw ShapeError("decode_stage: upsampled features do not match skip features of stage " + std::to_string(i));
    add_into(out.pre, enc.contributions.at(c).at(i));
  }
  out.features = ops::activate(out.pre, cfg.activation);
  return out;
}

template <class S>
struct HeadOutput {
  Tensor<S> logits;
  Tensor<S> probs;
};

/// 1x1 convolution to class logits and a per-pixel softmax (stage k in 1..L).
template <class S>
HeadOutput<S> stage_head(const ModelParams<S>& p, int k, const Tensor<S>& features) {
  if (k < 1 || k > p.config.levels) throw ShapeError("stage_head: stage index out of range");
  HeadOutput<S> h;
  h.logits = ops::conv2d(features, p(p.layout.head_w[k - 1]), p.ptr(p.layout.head_b[k - 1]), ops::pointwise);
  h.probs = ops::softmax_features(h.logits);
  return h;
}

/// Per-stage class probabilities plus the intermediate maps needed for
/// adaptation losses and backpropagation. Index k-1 holds stage k.
template <class S>
struct StagedPrediction {
  ChannelMask mask;
  Tensor<S> bottleneck;           // f_0, the fused sum before the nonlinearity
  Tensor<S> bottleneck_features;  // act(f_0), fed to stage 1
  std::vector<Tensor<S>> stage_pre;
  std::vector<Tensor<S>> stage_features;
  std::vector<Tensor<S>> logits;
  std::vector<Tensor<S>> probs;

  int stages() const { return static_cast<int>(probs.size()); }
  const Tensor<S>& final_probs() const { return probs.back(); }
};

template <class S>
StagedPrediction<S> decode(const ModelParams<S>& p, const EncoderFeatures<S>& enc, const ChannelMask& mask) {
  StagedPrediction<S> pred;
  pred.mask = mask;
  pred.bottleneck = fuse_bottleneck(p, enc, mask);
  pred.bottleneck_features = ops::activate(pred.bottleneck, p.config.activation);
  const Tensor<S>* prev = &pred.bottleneck_features;
  for (int i = 1; i <= p.config.levels; ++i) {
    auto st = decode_stage(p, i, *prev, enc, mask);
    auto head = stage_head(p, i, st.features);
    pred.stage_pre.push_back(std::move(st.pre));
    pred.stage_features.push_back(std::move(st.features));
    pred.logits.push_back(std::move(head.logits));
    pred.probs.push_back(std::move(head.probs));
    prev = &pred.stage_features.back();
  }
  return pred;
}

/// Masked inference on a (C, N, H, W) batch: only available channels are encoded.
template <class S>
StagedPrediction<S> forward(const ModelParams<S>& p, const Tensor<S>& images, const ChannelMask& mask) {
  return decode(p, encode(p, images, mask), mask);
}

// ---------------------------------------------------------------------------
// Backward

/// Gradients with respect to every channel's feature levels.
template <class S>
struct EncoderGrads {
  std::vector<std::vector<Tensor<S>>> levels;         // [channel][level]; empty for absent channels
  std::vector<std::vector<Tensor<S>>> contributions;  // same indexing as EncoderFeatures::contributions

  explicit EncoderGrads(const EncoderFeatures<S>& enc) : levels(enc.channels.size()), contributions(enc.channels.size()) {
    for (std::size_t c = 0; c < enc.channels.size(); ++c) {
      if (!enc.channels[c].present) continue;
      for (int i = 0; i <= enc.levels; ++i) {
        levels[c].push_back(Tensor<S>::zeros_like(enc.level(static_cast<int>(c), i)));
        contributions[c].push_back(Tensor<S>::zeros_like(enc.contributions[c][i]));
      }
    }
  }
};

/// Backpropagates through the decoder and heads.
///
/// grad_logits[k-1] is dLoss/dlogits of stage k (an empty tensor means none);
/// grad_bottleneck, if given, is a direct gradient on f_0. Parameter gradients
/// accumulate into grads; gradients on the per-channel skip and fusion terms
/// into enc_grads (encode_backward takes them the rest of the way).
template <class S>
void decode_backward(const ModelParams<S>& p, const EncoderFeatures<S>& enc, const StagedPrediction<S>& pred,
                     std::span<const Tensor<S>> grad_logits, const Tensor<S>* grad_bottleneck, std::span<S> grads,
                     EncoderGrads<S>& enc_grads) {
  const auto& cfg = p.config;
  const auto& L = p.layout;
  const int stages = cfg.levels;
  if (static_cast<int>(grad_logits.size()) != stages) throw ShapeError("decode_backward: need one gradient per stage");

  Tensor<S> grad_features = Tensor<S>::zeros_like(pred.stage_features[stages - 1]);
  for (int k = stages; k >= 1; --k) {
    const int s = k - 1;
    if (!grad_logits[s].empty()) {
      require_same_shape(grad_logits[s], pred.logits[s], "decode_backward");
      ops::conv2d_backward(pred.stage_features[s], p(L.head_w[s]), grad_logits[s], ops::pointwise,
                           p.grad_view(grads, L.head_w[s]), p.grad_ptr(grads, L.head_b[s]), &grad_features);
    }
    Tensor<S> grad_pre = Tensor<S>::zeros_like(pred.stage_pre[s]);
    ops::activate_backward(pred.stage_pre[s], grad_features, cfg.activation, grad_pre);
    for (int c = 0; c < cfg.channels; ++c)
      if (pred.mask[c]) add_into(enc_grads.contributions[c][k], grad_pre);
    const Tensor<S>& prev = k == 1 ? pred.bottleneck_features : pred.stage_features[s - 1];
    Tensor<S> grad_prev = Tensor<S>::zeros_like(prev);
    ops::upsample2x_backward(prev, p(L.up_w[s]), grad_pre, p.grad_view(grads, L.up_w[s]), p.grad_ptr(grads, L.up_b[s]),
                             &grad_prev);
    grad_features = std::move(grad_prev);
  }
  Tensor<S> grad_f0 = Tensor<S>::zeros_like(pred.bottleneck);
  ops::activate_backward(pred.bottleneck, grad_features, cfg.activation, grad_f0);
  if (grad_bottleneck) add_into(grad_f0, *grad_bottleneck);
  for (int c = 0; c < cfg.channels; ++c)
    if (pred.mask[c]) add_into(enc_grads.contributions[c][0], grad_f0);
}

/// Backpropagates the skip/fusion term gradients through every present encoder.
template <class S>
void encode_backward(const ModelParams<S>& p, const EncoderFeatures<S>& enc, EncoderGrads<S>& enc_grads,
                     std::span<S> grads) {
  const auto& cfg = p.config;
  const int Lv = cfg.levels;
  for (int c = 0; c < cfg.channels; ++c) {
    const auto& ch = enc.channels[c];
    if (!ch.present) continue;
    for (int i = 0; i <= Lv; ++i) {
      const std::size_t slot = i == 0 ? p.layout.fuse[c] : p.layout.skip[i - 1][c];
      ops::conv2d_backward(enc.level(c, i), p(slot), enc_grads.contributions[c][i], ops::conv3x3,
                           p.grad_view(grads, slot), static_cast<S*>(nullptr), &enc_grads.levels[c][i]);
    }
    Tensor<S> grad_out = enc_grads.levels[c][0];  // gradient on block L-1's output
    for (int b = Lv - 1; b >= 0; --b) {
      const auto& blk = p.layout.encoder[c][b];
      Tensor<S> grad_down_pre = Tensor<S>::zeros_like(ch.down_pre[b]);
      ops::activate_backward(ch.down_pre[b], grad_out, cfg.activation, grad_down_pre);
      Tensor<S> grad_skip = enc_grads.levels[c][Lv - b];
      ops::conv2d_backward(ch.skip[b], p(blk.down_w), grad_down_pre, ops::down3x3, p.grad_view(grads, blk.down_w),
                           p.grad_ptr(grads, blk.down_b), &grad_skip);
      Tensor<S> grad_conv_pre = Tensor<S>::zeros_like(ch.conv_pre[b]);
      ops::activate_backward(ch.conv_pre[b], grad_skip, cfg.activation, grad_conv_pre);
      const Tensor<S>& in = b == 0 ? ch.input : ch.down[b - 1];
      Tensor<S> grad_in;
      if (b > 0) grad_in = Tensor<S>::zeros_like(in);
      ops::conv2d_backward(in, p(blk.conv_w), grad_conv_pre, ops::conv3x3, p.grad_view(grads, blk.conv_w),
                           p.grad_ptr(grads, blk.conv_b), b > 0 ? &grad_in : nullptr);
      grad_out = std::move(grad_in);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching helpers

/// Stacks preprocessed samples into a (C, N, H, W) tensor.
template <class S>
Tensor<S> stack_images(std::span<const MultiModalSample* const> batch) {
  if (batch.empty()) throw ShapeError("stack_images: empty batch");
  const auto& first = *batch.front();
  Tensor<S> t(first.channels, static_cast<int>(batch.size()), first.height, first.width);
  const std::size_t plane = first.plane();
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& s = *batch[n];
    if (s.channels != first.channels || s.height != first.height || s.width != first.width)
      throw ShapeError("stack_images: samples differ in shape");
    for (int c = 0; c < s.channels; ++c) {
      const auto src = s.channel(c);
      S* dst = t.data.data() + (static_cast<std::size_t>(c) * batch.size() + n) * plane;
      for (std::size_t k = 0; k < plane; ++k) dst[k] = static_cast<S>(src[k]);
    }
  }
  return t;
}

template <class S>
Tensor<S> stack_images(const MultiModalSample& s) {
  const MultiModalSample* one[] = {&s};
  return stack_images<S>(std::span<const MultiModalSample* const>(one));
}

}  // namespace modalseg

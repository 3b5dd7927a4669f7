#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/model.hpp"
#include "modalseg/ops.hpp"
#include "modalseg/params.hpp"
#include "modalseg/rng.hpp"
#include "modalseg/tensor.hpp"

namespace modalseg {

struct LossConfig {
  double alpha = 1.0;  // weight of the dropped-input segmentation loss
  double beta = 0.1;   // weight of the adversarial similarity loss
  double eps = 1e-7;   // probability floor inside logs

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
      throw ConfigError("loss: alpha and beta must be finite and nonnegative");
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("loss: eps must be in (0, 0.5)");
  }
};

inline void to_json(json& j, const LossConfig& c) { j = {{"alpha", c.alpha}, {"beta", c.beta}, {"eps", c.eps}}; }

inline void from_json(const json& j, LossConfig& c) {
  reject_unknown_keys(j, {"alpha", "beta", "eps"}, "loss");
  read_optional(j, "alpha", c.alpha, "loss");
  read_optional(j, "beta", c.beta, "loss");
  read_optional(j, "eps", c.eps, "loss");
}

// ---------------------------------------------------------------------------
// Labels

/// Batch of class-index maps, [sample][row][col].
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int ni, int y, int x) const {
    return data[(static_cast<std::size_t>(ni) * h + y) * w + x];
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Nearest-neighbour downsampling that keeps the top-left label of each
/// factor x factor block.
inline std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, int h, int w, int factor) {
  if (factor < 1 || (factor & (factor - 1)) != 0) throw ShapeError("downsample_labels: factor must be a power of two");
  if (static_cast<std::size_t>(h) * w != labels.size()) throw ShapeError("downsample_labels: size mismatch");
  if (h % factor != 0 || w % factor != 0) throw ShapeError("downsample_labels: dimensions not divisible by factor");
  const int oh = h / factor, ow = w / factor;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      out[static_cast<std::size_t>(y) * ow + x] = labels[static_cast<std::size_t>(y) * factor * w + x * factor];
  return out;
}

inline LabelMap downsample_labels(const LabelMap& m, int factor) {
  LabelMap out{m.n, m.h / factor, m.w / factor, {}};
  const std::size_t plane = static_cast<std::size_t>(m.h) * m.w;
  for (int n = 0; n < m.n; ++n) {
    const auto d = downsample_labels(std::span(m.data).subspan(n * plane, plane), m.h, m.w, factor);
    out.data.insert(out.data.end(), d.begin(), d.end());
  }
  return out;
}

/// Labels at every decoder stage; stage k (index k-1) is downsampled by 2^(L-k).
struct StagedLabels {
  std::vector<LabelMap> stages;
};

inline StagedLabels stage_labels(const LabelMap& full, int stages) {
  StagedLabels s;
  for (int k = 1; k <= stages; ++k) s.stages.push_back(downsample_labels(full, 1 << (stages - k)));
  return s;
}

inline LabelMap stack_labels(std::span<const MultiModalSample* const> batch) {
  LabelMap m{static_cast<int>(batch.size()), batch.front()->height, batch.front()->width, {}};
  for (const auto* s : batch) m.data.insert(m.data.end(), s->labels.begin(), s->labels.end());
  return m;
}

// ---------------------------------------------------------------------------
// Deep-supervision cross-entropy

namespace detail {
template <class S>
void check_stage(const Tensor<S>& probs, const LabelMap& labels, int k) {
  if (probs.n != labels.n || probs.h != labels.h || probs.w != labels.w)
    throw ShapeError("seg_loss: stage " + std::to_string(k) + " prediction and label shapes differ");
}
}  // namespace detail

/// Sum over stages of the per-pixel mean of -log(max(p_true, eps)).
template <class S>
double seg_loss(const StagedPrediction<S>& pred, const StagedLabels& labels, double eps = 1e-7) {
  if (static_cast<int>(labels.stages.size()) != pred.stages()) throw ShapeError("seg_loss: stage count mismatch");
  double total = 0.0;
  for (int k = 0; k < pred.stages(); ++k) {
    const auto& p = pred.probs[k];
    const auto& y = labels.stages[k];
    detail::check_stage(p, y, k + 1);
    const std::size_t cols = static_cast<std::size_t>(p.cols());
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const int cls = y.data[j];
      if (cls >= p.c) throw ShapeError("seg_loss: label index exceeds class count");
      const double pt = static_cast<double>(p.data[cls * cols + j]);
      if (std::isnan(pt)) throw NumericError("seg_loss", "NaN in stage " + std::to_string(k + 1) + " prediction");
      sum -= std::log(std::max(pt, eps));
    }
    total += sum / static_cast<double>(cols);
  }
  return total;
}

/// Gradient of scale * seg_loss with respect to each stage's logits.
template <class S>
std::vector<Tensor<S>> seg_loss_grad(const StagedPrediction<S>& pred, const StagedLabels& labels, double eps,
                                     double scale) {
  std::vector<Tensor<S>> grads;
  for (int k = 0; k < pred.stages(); ++k) {
    const auto& p = pred.probs[k];
    const auto& y = labels.stages[k];
    detail::check_stage(p, y, k + 1);
    Tensor<S> g = Tensor<S>::zeros_like(p);
    const std::size_t cols = static_cast<std::size_t>(p.cols());
    const S per_pixel = static_cast<S>(scale / static_cast<double>(cols));
    for (std::size_t j = 0; j < cols; ++j) {
      const int cls = y.data[j];
      if (!(static_cast<double>(p.data[cls * cols + j]) > eps)) continue;  // clipped: constant loss
      for (int c = 0; c < p.c; ++c) g.data[c * cols + j] = per_pixel * p.data[c * cols + j];
      g.data[cls * cols + j] -= per_pixel;
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Discriminator on bottleneck feature maps

struct DiscriminatorConfig {
  int in_channels = 64;
  int height = 8;
  int width = 8;
  std::vector<int> widths{32, 64};
  double slope = 0.01;
  double logit_clip = 30.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels <= 0 || height <= 0 || width <= 0) throw ConfigError("discriminator: bad input shape");
    if (widths.empty()) throw ConfigError("discriminator: needs at least one convolution");
    for (int w : widths)
      if (w <= 0) throw ConfigError("discriminator: widths must be positive");
    if (!(logit_clip > 0.0)) throw ConfigError("discriminator: logit_clip must be positive");
  }

  /// Input geometry taken from a model's bottleneck.
  static DiscriminatorConfig for_model(const ModelConfig& m) {
    DiscriminatorConfig d;
    d.in_channels = m.bottleneck_width;
    d.height = m.level_height(0);
    d.width = m.level_width_px(0);
    d.slope = m.activation.slope;
    return d;
  }

  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

inline void to_json(json& j, const DiscriminatorConfig& d) {
  j = {{"in_channels", d.in_channels}, {"height", d.height}, {"width", d.width}, {"widths", d.widths},
       {"slope", d.slope},           {"logit_clip", d.logit_clip}, {"seed", d.seed}};
}

inline void from_json(const json& j, DiscriminatorConfig& d) {
  constexpr std::string_view s = "discriminator";
  reject_unknown_keys(j, {"in_channels", "height", "width", "widths", "slope", "logit_clip", "seed"}, s);
  read_optional(j, "in_channels", d.in_channels, s);
  read_optional(j, "height", d.height, s);
  read_optional(j, "width", d.width, s);
  read_optional(j, "widths", d.widths, s);
  read_optional(j, "slope", d.slope, s);
  read_optional(j, "logit_clip", d.logit_clip, s);
  read_optional(j, "seed", d.seed, s);
}

/// Stride-2 3x3 convolutions with leaky rectifiers, global average pooling and
/// an affine map to one logit per sample.
template <class S>
struct DiscriminatorParams {
  DiscriminatorConfig config;
  ParamLayout layout;
  std::vector<std::size_t> conv_w, conv_b;
  std::size_t out_w = 0, out_b = 0;
  std::vector<S> values;

  ConstMatMap<S> operator()(std::size_t slot) const { return view(std::span<const S>(values), layout[slot]); }
  const S* ptr(std::size_t slot) const { return values.data() + layout[slot].offset; }
  std::size_t size() const { return values.size(); }
};

template <class S>
DiscriminatorParams<S> init_discriminator(const DiscriminatorConfig& cfg) {
  cfg.validate();
  DiscriminatorParams<S> d;
  d.config = cfg;
  int in = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    d.conv_w.push_back(d.layout.add("disc.conv" + std::to_string(i) + ".w", cfg.widths[i], in * 9));
    d.conv_b.push_back(d.layout.add("disc.conv" + std::to_string(i) + ".b", cfg.widths[i], 1));
    in = cfg.widths[i];
  }
  d.out_w = d.layout.add("disc.out.w", 1, in);
  d.out_b = d.layout.add("disc.out.b", 1, 1);
  d.values.assign(d.layout.total(), S(0));
  Rng rng(derive_seed(cfg.seed, 0xD15C));
  for (std::size_t slot : d.conv_w) {
    const auto& s = d.layout[slot];
    const double bound = std::sqrt(6.0 / s.cols);
    for (std::size_t k = 0; k < s.size(); ++k) d.values[s.offset + k] = static_cast<S>(rng.uniform(-bound, bound));
  }
  const auto& o = d.layout[d.out_w];
  const double bound = std::sqrt(3.0 / o.cols);
  for (std::size_t k = 0; k < o.size(); ++k) d.values[o.offset + k] = static_cast<S>(rng.uniform(-bound, bound));
  return d;
}

template <class S>
struct DiscriminatorPass {
  std::vector<Tensor<S>> inputs, pre;  // per convolution
  Tensor<S> last;                      // output of the last convolution
  std::vector<S> pooled;               // [feature][sample]
  std::vector<double> logits;          // unclipped, per sample
  std::vector<double> probs;           // sigmoid of the clipped logit

  double clipped(std::size_t n, double clip) const { return std::clamp(logits[n], -clip, clip); }
};

template <class S>
DiscriminatorPass<S> discriminator_pass(const DiscriminatorParams<S>& d, const Tensor<S>& features) {
  const auto& cfg = d.config;
  if (features.c != cfg.in_channels || features.h != cfg.height || features.w != cfg.width)
    throw ShapeError("discriminator: input does not have the bottleneck shape");
  const ops::Activation act{ops::ActivationKind::leaky_relu, cfg.slope};
  DiscriminatorPass<S> pass;
  Tensor<S> x = features;
  for (std::size_t i = 0; i < d.conv_w.size(); ++i) {
    pass.inputs.push_back(x);
    pass.pre.push_back(ops::conv2d(x, d(d.conv_w[i]), d.ptr(d.conv_b[i]), ops::down3x3));
    x = ops::activate(pass.pre.back(), act);
  }
  pass.last = std::move(x);
  const int F = pass.last.c, N = pass.last.n, P = pass.last.plane();
  pass.pooled.assign(static_cast<std::size_t>(F) * N, S(0));
  for (int f = 0; f < F; ++f)
    for (int n = 0; n < N; ++n) {
      const S* src = pass.last.data.data() + (static_cast<std::size_t>(f) * N + n) * P;
      S sum = 0;
      for (int k = 0; k < P; ++k) sum += src[k];
      pass.pooled[static_cast<std::size_t>(f) * N + n] = sum / static_cast<S>(P);
    }
  const S* w = d.ptr(d.out_w);
  const S b = *d.ptr(d.out_b);
  for (int n = 0; n < N; ++n) {
    S z = b;
    for (int f = 0; f < F; ++f) z += w[f] * pass.pooled[static_cast<std::size_t>(f) * N + n];
    pass.logits.push_back(static_cast<double>(z));
    const double zc = pass.clipped(static_cast<std::size_t>(n), cfg.logit_clip);
    pass.probs.push_back(1.0 / (1.0 + std::exp(-zc)));
  }
  return pass;
}

/// D_theta(f0) for each sample of the batch, strictly inside (0, 1).
template <class S>
std::vector<double> discriminator_forward(const DiscriminatorParams<S>& d, const Tensor<S>& features) {
  return discriminator_pass(d, features).probs;
}

/// Backward from dLoss/d(clipped logit) per sample. The clip passes no
/// gradient outside [-clip, clip]. grad_theta may be empty; grad_input may be null.
template <class S>
void discriminator_backward(const DiscriminatorParams<S>& d, const DiscriminatorPass<S>& pass,
                            std::span<const double> grad_logit, std::span<S> grad_theta, Tensor<S>* grad_input) {
  const auto& cfg = d.config;
  const int F = pass.last.c, N = pass.last.n, P = pass.last.plane();
  std::vector<S> gz(N);
  for (int n = 0; n < N; ++n)
    gz[n] = std::abs(pass.logits[n]) < cfg.logit_clip ? static_cast<S>(grad_logit[n]) : S(0);
  std::vector<S> theta_scratch;
  if (grad_theta.empty()) {
    theta_scratch.assign(d.size(), S(0));
    grad_theta = theta_scratch;
  }
  const S* w = d.ptr(d.out_w);
  S* gw = grad_theta.data() + d.layout[d.out_w].offset;
  S* gb = grad_theta.data() + d.layout[d.out_b].offset;
  Tensor<S> grad = Tensor<S>::zeros_like(pass.last);
  for (int n = 0; n < N; ++n) {
    *gb += gz[n];
    for (int f = 0; f < F; ++f) {
      gw[f] += gz[n] * pass.pooled[static_cast<std::size_t>(f) * N + n];
      const S g = gz[n] * w[f] / static_cast<S>(P);
      S* dst = grad.data.data() + (static_cast<std::size_t>(f) * N + n) * P;
      for (int k = 0; k < P; ++k) dst[k] = g;
    }
  }
  const ops::Activation act{ops::ActivationKind::leaky_relu, cfg.slope};
  for (int i = static_cast<int>(d.conv_w.size()) - 1; i >= 0; --i) {
    Tensor<S> grad_pre = Tensor<S>::zeros_like(pass.pre[i]);
    ops::activate_backward(pass.pre[i], grad, act, grad_pre);
    const bool want_input = i > 0 || grad_input != nullptr;
    Tensor<S> grad_in;
    if (want_input) grad_in = Tensor<S>::zeros_like(pass.inputs[i]);
    ops::conv2d_backward(pass.inputs[i], d(d.conv_w[i]), grad_pre, ops::down3x3, view(grad_theta, d.layout[d.conv_w[i]]),
                         grad_theta.data() + d.layout[d.conv_b[i]].offset, want_input ? &grad_in : nullptr);
    grad = std::move(grad_in);
  }
  if (grad_input) add_into(*grad_input, grad);
}

// ---------------------------------------------------------------------------
// Adversarial similarity losses

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct SimilarityLosses {
  double d_loss = 0.0;
  double g_loss = 0.0;
};

/// Discriminator passes on the dropped-input bottleneck ("real") and on the
/// (C-1)/C-scaled full-input bottleneck ("fake").
template <class S>
struct AdversarialPass {
  double scale = 1.0;
  Tensor<S> fake;
  DiscriminatorPass<S> on_drop;
  DiscriminatorPass<S> on_fake;
  SimilarityLosses losses;
};

inline double expectation_ratio(int channels) {
  if (channels < 2) throw ConfigError("similarity loss needs at least 2 channels");
  return static_cast<double>(channels - 1) / channels;
}

template <class S>
Tensor<S> scaled(const Tensor<S>& t, double s) {
  Tensor<S> out = t;
  for (auto& v : out.data) v *= static_cast<S>(s);
  return out;
}

/// d_loss = -mean[log D(f0_drop) + log(1 - D(s*f0_full))],
/// g_loss = -mean log D(s*f0_full), with s = (C-1)/C.
template <class S>
AdversarialPass<S> similarity_pass(const DiscriminatorParams<S>& d, const Tensor<S>& f0_full, const Tensor<S>& f0_drop,
                                   int channels) {
  require_same_shape(f0_full, f0_drop, "similarity_losses");
  AdversarialPass<S> a;
  a.scale = expectation_ratio(channels);
  a.fake = scaled(f0_full, a.scale);
  a.on_drop = discriminator_pass(d, f0_drop);
  a.on_fake = discriminator_pass(d, a.fake);
  const double clip = d.config.logit_clip;
  const std::size_t N = a.on_drop.logits.size();
  for (std::size_t n = 0; n < N; ++n) {
    const double zr = a.on_drop.clipped(n, clip), zf = a.on_fake.clipped(n, clip);
    a.losses.d_loss += softplus(-zr) + softplus(zf);
    a.losses.g_loss += softplus(-zf);
  }
  a.losses.d_loss /= static_cast<double>(N);
  a.losses.g_loss /= static_cast<double>(N);
  return a;
}

template <class S>
SimilarityLosses similarity_losses(const DiscriminatorParams<S>& d, const Tensor<S>& f0_full, const Tensor<S>& f0_drop,
                                   int channels) {
  return similarity_pass(d, f0_full, f0_drop, channels).losses;
}

/// Gradient of scale * d_loss. grad_theta may be empty; feature gradients may be null.
template <class S>
void d_loss_backward(const DiscriminatorParams<S>& d, const AdversarialPass<S>& a, double scale, std::span<S> grad_theta,
                     Tensor<S>* grad_f0_full, Tensor<S>* grad_f0_drop) {
  const std::size_t N = a.on_drop.logits.size();
  std::vector<double> g_real(N), g_fake(N);
  for (std::size_t n = 0; n < N; ++n) {
    g_real[n] = scale * (a.on_drop.probs[n] - 1.0) / static_cast<double>(N);
    g_fake[n] = scale * a.on_fake.probs[n] / static_cast<double>(N);
  }
  discriminator_backward(d, a.on_drop, std::span<const double>(g_real), grad_theta, grad_f0_drop);
  Tensor<S> grad_fake = Tensor<S>::zeros_like(a.fake);
  discriminator_backward(d, a.on_fake, std::span<const double>(g_fake), grad_theta, grad_f0_full ? &grad_fake : nullptr);
  if (grad_f0_full) add_into(*grad_f0_full, scaled(grad_fake, a.scale));
}

/// Gradient of scale * g_loss with respect to f0_full only; theta is frozen.
template <class S>
void g_loss_backward(const DiscriminatorParams<S>& d, const AdversarialPass<S>& a, double scale, Tensor<S>& grad_f0_full) {
  const std::size_t N = a.on_fake.logits.size();
  std::vector<double> g(N);
  for (std::size_t n = 0; n < N; ++n) g[n] = scale * (a.on_fake.probs[n] - 1.0) / static_cast<double>(N);
  Tensor<S> grad_fake = Tensor<S>::zeros_like(a.fake);
  discriminator_backward(d, a.on_fake, std::span<const double>(g), std::span<S>(), &grad_fake);
  add_into(grad_f0_full, scaled(grad_fake, a.scale));
}

/// loss_full + alpha * loss_drop + beta * g_loss.
inline double total_loss(double loss_full, double loss_drop, double g_loss, const LossConfig& cfg) {
  if (!std::isfinite(loss_full)) throw NumericError("loss_full", "non-finite segmentation loss");
  if (!std::isfinite(loss_drop)) throw NumericError("loss_drop", "non-finite segmentation loss");
  if (!std::isfinite(g_loss)) throw NumericError("g_loss", "non-finite similarity loss");
  return loss_full + cfg.alpha * loss_drop + cfg.beta * g_loss;
}

}  // namespace modalseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modalseg/modalseg.hpp"

namespace modalseg::testing {

/// C=2, 16x16, two levels of widths [2, 3], K=2: small enough for finite differences.
inline ModelConfig tiny_model_config(std::uint64_t seed = 5) {
  ModelConfig m;
  m.channels = 2;
  m.classes = 2;
  m.height = 16;
  m.width = 16;
  m.levels = 2;
  m.encoder_widths = {2, 3};
  m.bottleneck_width = 3;
  m.seed = seed;
  return m;
}

inline DiscriminatorConfig tiny_discriminator_config(const ModelConfig& m, std::uint64_t seed = 9) {
  DiscriminatorConfig d = DiscriminatorConfig::for_model(m);
  d.widths = {3, 4};
  d.seed = seed;
  return d;
}

/// Model with every parameter (biases included) drawn uniformly, so no term is trivially zero.
template <class S>
ModelParams<S> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  ModelParams<S> p = init_model<S>(cfg);
  Rng rng(seed);
  for (auto& v : p.values) v = static_cast<S>(rng.uniform(-scale, scale));
  return p;
}

template <class S>
Tensor<S> random_images(int channels, int n, int h, int w, std::uint64_t seed) {
  Tensor<S> t(channels, n, h, w);
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(-1.0, 1.0));
  return t;
}

inline LabelMap random_labels(int n, int h, int w, int classes, std::uint64_t seed) {
  LabelMap m{n, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * h * w)};
  Rng rng(seed);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return m;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

/// Largest elementwise difference across every stage map of two predictions.
template <class S>
double max_prediction_diff(const StagedPrediction<S>& a, const StagedPrediction<S>& b) {
  double m = max_abs_diff(a.bottleneck, b.bottleneck);
  for (int k = 0; k < a.stages(); ++k) {
    m = std::max(m, max_abs_diff(a.stage_pre[k], b.stage_pre[k]));
    m = std::max(m, max_abs_diff(a.probs[k], b.probs[k]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check on the tiny model, in double precision.

enum class CheckedLoss { seg_full, seg_drop, d_loss, g_loss };

inline const char* checked_loss_name(CheckedLoss l) {
  switch (l) {
    case CheckedLoss::seg_full: return "seg_loss(full)";
    case CheckedLoss::seg_drop: return "seg_loss(drop)";
    case CheckedLoss::d_loss: return "d_loss";
    case CheckedLoss::g_loss: return "g_loss";
  }
  return "?";
}

struct GradientProblem {
  ModelParams<double> model;
  DiscriminatorParams<double> disc;
  Tensor<double> images;
  StagedLabels labels;
  ChannelMask drop;
  double eps = 1e-7;
};

inline GradientProblem make_gradient_problem(std::uint64_t seed = 1, int batch = 2) {
  const ModelConfig mc = tiny_model_config(seed);
  GradientProblem g{random_model<double>(mc, derive_seed(seed, 1), 0.6),
                    init_discriminator<double>(tiny_discriminator_config(mc, seed)),
                    random_images<double>(mc.channels, batch, mc.height, mc.width, derive_seed(seed, 2)),
                    stage_labels(random_labels(batch, mc.height, mc.width, mc.classes, derive_seed(seed, 3)), mc.levels),
                    ChannelMask::without(mc.channels, 1)};
  Rng rng(derive_seed(seed, 4));
  for (auto& v : g.disc.values) v = rng.uniform(-0.6, 0.6);
  return g;
}

inline double evaluate_loss(const GradientProblem& g, CheckedLoss which) {
  const int C = g.model.config.channels;
  const auto full = ChannelMask::full(C);
  const auto enc = encode(g.model, g.images, full);
  if (which == CheckedLoss::seg_full) return seg_loss(decode(g.model, enc, full), g.labels, g.eps);
  const auto pd = decode(g.model, enc, g.drop);
  if (which == CheckedLoss::seg_drop) return seg_loss(pd, g.labels, g.eps);
  const auto pf = decode(g.model, enc, full);
  const auto l = similarity_losses(g.disc, pf.bottleneck, pd.bottleneck, C);
  return which == CheckedLoss::d_loss ? l.d_loss : l.g_loss;
}

struct AnalyticGradients {
  std::vector<double> model;
  std::vector<double> disc;
};

inline AnalyticGradients analytic_gradients(const GradientProblem& g, CheckedLoss which) {
  const auto& p = g.model;
  const int C = p.config.channels;
  const auto full = ChannelMask::full(C);
  AnalyticGradients out{std::vector<double>(p.size(), 0.0), std::vector<double>(g.disc.size(), 0.0)};
  const auto enc = encode(p, g.images, full);
  const auto pf = decode(p, enc, full);
  const auto pd = decode(p, enc, g.drop);
  EncoderGrads<double> eg(enc);
  const std::vector<Tensor<double>> none(static_cast<std::size_t>(p.config.levels));
  std::span<double> gm(out.model);
  const Tensor<double>* no_f0 = nullptr;

  switch (which) {
    case CheckedLoss::seg_full: {
      const auto gl = seg_loss_grad(pf, g.labels, g.eps, 1.0);
      decode_backward(p, enc, pf, std::span<const Tensor<double>>(gl), no_f0, gm, eg);
      break;
    }
    case CheckedLoss::seg_drop: {
      const auto gl = seg_loss_grad(pd, g.labels, g.eps, 1.0);
      decode_backward(p, enc, pd, std::span<const Tensor<double>>(gl), no_f0, gm, eg);
      break;
    }
    case CheckedLoss::d_loss: {
      const auto a = similarity_pass(g.disc, pf.bottleneck, pd.bottleneck, C);
      Tensor<double> gfull = Tensor<double>::zeros_like(pf.bottleneck), gdrop = gfull;
      d_loss_backward(g.disc, a, 1.0, std::span<double>(out.disc), &gfull, &gdrop);
      decode_backward(p, enc, pf, std::span<const Tensor<double>>(none), &gfull, gm, eg);
      decode_backward(p, enc, pd, std::span<const Tensor<double>>(none), &gdrop, gm, eg);
      break;
    }
    case CheckedLoss::g_loss: {
      const auto a = similarity_pass(g.disc, pf.bottleneck, pd.bottleneck, C);
      Tensor<double> gfull = Tensor<double>::zeros_like(pf.bottleneck);
      g_loss_backward(g.disc, a, 1.0, gfull);
      decode_backward(p, enc, pf, std::span<const Tensor<double>>(none), &gfull, gm, eg);
      break;
    }
  }
  encode_backward(p, enc, eg, gm);
  return out;
}

struct GradientCheck {
  std::string loss;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;  // parameter with the largest error
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps round-off on vanishing
/// gradients from reading as a large relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences with step h over every model parameter and, for d_loss,
/// every discriminator parameter. (g_loss is not differentiated w.r.t. the
/// discriminator: it is frozen during the model update.)
inline GradientCheck check_gradients(GradientProblem g, CheckedLoss which, double h = 1e-5) {
  const AnalyticGradients an = analytic_gradients(g, which);
  GradientCheck r{checked_loss_name(which)};
  auto probe = [&](std::vector<double>& values, std::size_t i, double analytic, const std::string& name) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = evaluate_loss(g, which);
    values[i] = keep - h;
    const double down = evaluate_loss(g, which);
    values[i] = keep;
    const double err = relative_error(analytic, (up - down) / (2.0 * h));
    ++r.checked;
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = name;
    }
  };
  for (const auto& slot : g.model.layout.params.slots())
    for (std::size_t k = 0; k < slot.size(); ++k)
      probe(g.model.values, slot.offset + k, an.model[slot.offset + k], slot.name + "[" + std::to_string(k) + "]");
  if (which == CheckedLoss::d_loss)
    for (const auto& slot : g.disc.layout.slots())
      for (std::size_t k = 0; k < slot.size(); ++k)
        probe(g.disc.values, slot.offset + k, an.disc[slot.offset + k], slot.name + "[" + std::to_string(k) + "]");
  return r;
}

// ---------------------------------------------------------------------------
// Files

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("modalseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::vector<std::string> lines;
  std::istringstream in(read_text_file(p));
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace modalseg::testing

namespace modalseg::testing {

/// Four-channel model small enough for multi-step training inside a unit test.
inline ModelConfig small_model_config(std::uint64_t seed = 2) {
  ModelConfig m;
  m.height = 32;
  m.width = 32;
  m.levels = 2;
  m.encoder_widths = {4, 8};
  m.bottleneck_width = 8;
  m.seed = seed;
  return m;
}

inline DiscriminatorConfig small_discriminator_config(const ModelConfig& m, std::uint64_t seed = 3) {
  DiscriminatorConfig d = DiscriminatorConfig::for_model(m);
  d.widths = {4, 8};
  d.seed = seed;
  return d;
}

inline std::vector<MultiModalSample> small_samples(int count, std::uint64_t seed = 5) {
  SyntheticSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.seed = seed;
  std::vector<MultiModalSample> out;
  for (int i = 0; i < count; ++i) out.push_back(preprocess(synthesize_sample(spec, i).sample, 32, 32));
  return out;
}

}  // namespace modalseg::testing

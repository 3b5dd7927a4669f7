#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "modalseg/binary_io.hpp"
#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/losses.hpp"
#include "modalseg/model.hpp"
#include "modalseg/rng.hpp"

namespace modalseg {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamState {
  std::vector<S> m;
  std::vector<S> v;

  explicit AdamState(std::size_t n = 0) : m(n, S(0)), v(n, S(0)) {}
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update; `t` is the 1-based update count.
template <class S>
void adam_update(std::span<S> params, std::span<const S> grads, AdamState<S>& st, double lr, const AdamConfig& cfg,
                 std::uint64_t t) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step = static_cast<S>(lr / c1);
  const S inv_c2 = static_cast<S>(1.0 / c2);
  const S eps = static_cast<S>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const S g = grads[i];
    st.m[i] = b1 * st.m[i] + (S(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (S(1) - b2) * g * g;
    params[i] -= step * st.m[i] / (std::sqrt(st.v[i] * inv_c2) + eps);
  }
}

// ---------------------------------------------------------------------------
// Configuration and state

struct TrainConfig {
  int steps = 2000;
  int batch_size = 8;
  double lr = 1e-3;
  double d_lr = 2e-4;
  AdamConfig adam;
  LossConfig loss;
  int checkpoint_interval = 500;  // 0 writes only the final checkpoint
  std::uint64_t seed = 1;
  std::string dataset;
  std::string out_dir;

  void validate() const {
    if (steps < 0) throw ConfigError("train: steps must be nonnegative");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    // A zero discriminator rate freezes theta, which the baseline ablation uses.
    if (!(d_lr >= 0.0) || !std::isfinite(d_lr)) throw ConfigError("train: d_lr must be nonnegative");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0))
      throw ConfigError("train: invalid Adam hyperparameters");
    if (checkpoint_interval < 0) throw ConfigError("train: checkpoint_interval must be nonnegative");
    loss.validate();
  }
};

inline void to_json(json& j, const TrainConfig& t) {
  j = {{"steps", t.steps},
       {"batch_size", t.batch_size},
       {"lr", t.lr},
       {"d_lr", t.d_lr},
       {"beta1", t.adam.beta1},
       {"beta2", t.adam.beta2},
       {"adam_eps", t.adam.eps},
       {"checkpoint_interval", t.checkpoint_interval},
       {"seed", t.seed},
       {"dataset", t.dataset},
       {"out_dir", t.out_dir}};
}

inline void from_json(const json& j, TrainConfig& t) {
  constexpr std::string_view s = "train";
  reject_unknown_keys(j, {"steps", "batch_size", "lr", "d_lr", "beta1", "beta2", "adam_eps", "checkpoint_interval",
                          "seed", "dataset", "out_dir"},
                      s);
  read_optional(j, "steps", t.steps, s);
  read_optional(j, "batch_size", t.batch_size, s);
  read_optional(j, "lr", t.lr, s);
  read_optional(j, "d_lr", t.d_lr, s);
  read_optional(j, "beta1", t.adam.beta1, s);
  read_optional(j, "beta2", t.adam.beta2, s);
  read_optional(j, "adam_eps", t.adam.eps, s);
  read_optional(j, "checkpoint_interval", t.checkpoint_interval, s);
  read_optional(j, "seed", t.seed, s);
  read_optional(j, "dataset", t.dataset, s);
  read_optional(j, "out_dir", t.out_dir, s);
}

template <class S>
struct TrainState {
  ModelParams<S> model;
  DiscriminatorParams<S> disc;
  AdamState<S> model_opt;
  AdamState<S> disc_opt;
  std::uint64_t step = 0;
  Rng rng;
};

/// Fresh state: model from model_cfg.seed, discriminator from disc_cfg.seed,
/// sampling stream from seed.
template <class S>
TrainState<S> make_train_state(const ModelConfig& model_cfg, const DiscriminatorConfig& disc_cfg, std::uint64_t seed) {
  TrainState<S> st{init_model<S>(model_cfg), init_discriminator<S>(disc_cfg), AdamState<S>(), AdamState<S>(), 0,
                   Rng(derive_seed(seed, 0x5A))};
  st.model_opt = AdamState<S>(st.model.size());
  st.disc_opt = AdamState<S>(st.disc.size());
  return st;
}

// ---------------------------------------------------------------------------
// Modality drop

/// Keep-mask with exactly one channel removed.
struct DropMask {
  ChannelMask keep;
  int dropped = -1;
};

/// Drops one channel chosen uniformly among `channels`.
inline DropMask sample_drop_channel(Rng& rng, int channels) {
  if (channels < 2) throw ConfigError("sample_drop_channel: need at least 2 channels");
  const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(channels)));
  return {ChannelMask::without(channels, c), c};
}

// ---------------------------------------------------------------------------
// Training step

struct StepMetrics {
  std::uint64_t step = 0;
  double loss_full = 0.0;
  double loss_drop = 0.0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  int dropped_channel = -1;

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

inline json to_json_value(const StepMetrics& m) {
  return {{"step", m.step},   {"loss_full", m.loss_full}, {"loss_drop", m.loss_drop},
          {"d_loss", m.d_loss}, {"g_loss", m.g_loss},      {"dropped_channel", m.dropped_channel}};
}

inline StepMetrics metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::uint64_t>();
  m.loss_full = j.at("loss_full").get<double>();
  m.loss_drop = j.at("loss_drop").get<double>();
  m.d_loss = j.at("d_loss").get<double>();
  m.g_loss = j.at("g_loss").get<double>();
  m.dropped_channel = j.at("dropped_channel").get<int>();
  return m;
}

namespace detail {
inline void require_finite(double v, const char* component) {
  if (!std::isfinite(v)) throw NumericError(component, "non-finite value " + std::to_string(v));
}

// seg_loss rejects NaN probabilities itself; rename the component so the
// diagnostic says which of the two losses blew up.
template <class S>
double named_seg_loss(const StagedPrediction<S>& pred, const StagedLabels& labels, double eps, const char* component) {
  double v = 0.0;
  try {
    v = seg_loss(pred, labels, eps);
  } catch (const NumericError& e) {
    throw NumericError(component, e.what());
  }
  require_finite(v, component);
  return v;
}
}  // namespace detail

/// One iteration: full and single-drop forward passes sharing the encoders,
/// a discriminator update on d_loss, then a model update on
/// loss_full + alpha*loss_drop + beta*g_loss, where g_loss is evaluated with
/// the freshly updated discriminator. The reported g_loss is that value.
template <class S>
StepMetrics train_step(TrainState<S>& st, std::span<const MultiModalSample* const> batch, const TrainConfig& cfg) {
  const auto& mcfg = st.model.config;
  const int C = mcfg.channels;
  const Tensor<S> images = stack_images<S>(batch);
  const StagedLabels labels = stage_labels(stack_labels(batch), mcfg.levels);
  const DropMask drop = sample_drop_channel(st.rng, C);
  const ChannelMask full = ChannelMask::full(C);

  const EncoderFeatures<S> enc = encode(st.model, images, full);
  const StagedPrediction<S> pred_full = decode(st.model, enc, full);
  const StagedPrediction<S> pred_drop = decode(st.model, enc, drop.keep);

  StepMetrics m;
  m.dropped_channel = drop.dropped;
  m.loss_full = detail::named_seg_loss(pred_full, labels, cfg.loss.eps, "loss_full");
  m.loss_drop = detail::named_seg_loss(pred_drop, labels, cfg.loss.eps, "loss_drop");
  const AdversarialPass<S> adv = similarity_pass(st.disc, pred_full.bottleneck, pred_drop.bottleneck, C);
  m.d_loss = adv.losses.d_loss;
  detail::require_finite(m.d_loss, "d_loss");

  const std::uint64_t t = st.step + 1;

  // Discriminator update; theta only.
  std::vector<S> grad_theta(st.disc.size(), S(0));
  d_loss_backward(st.disc, adv, 1.0, std::span<S>(grad_theta), static_cast<Tensor<S>*>(nullptr),
                  static_cast<Tensor<S>*>(nullptr));
  adam_update(std::span<S>(st.disc.values), std::span<const S>(grad_theta), st.disc_opt, cfg.d_lr, cfg.adam, t);

  // Model update; phi only, discriminator frozen at its new value.
  const AdversarialPass<S> adv_g = similarity_pass(st.disc, pred_full.bottleneck, pred_drop.bottleneck, C);
  m.g_loss = adv_g.losses.g_loss;
  detail::require_finite(m.g_loss, "g_loss");
  total_loss(m.loss_full, m.loss_drop, m.g_loss, cfg.loss);

  std::vector<S> grads(st.model.size(), S(0));
  EncoderGrads<S> enc_grads(enc);
  const auto g_full = seg_loss_grad(pred_full, labels, cfg.loss.eps, 1.0);
  Tensor<S> grad_f0 = Tensor<S>::zeros_like(pred_full.bottleneck);
  const bool adversarial = cfg.loss.beta > 0.0;
  if (adversarial) g_loss_backward(st.disc, adv_g, cfg.loss.beta, grad_f0);
  decode_backward(st.model, enc, pred_full, std::span<const Tensor<S>>(g_full), adversarial ? &grad_f0 : nullptr,
                  std::span<S>(grads), enc_grads);
  if (cfg.loss.alpha > 0.0) {
    const auto g_drop = seg_loss_grad(pred_drop, labels, cfg.loss.eps, cfg.loss.alpha);
    decode_backward(st.model, enc, pred_drop, std::span<const Tensor<S>>(g_drop), static_cast<const Tensor<S>*>(nullptr), std::span<S>(grads),
                    enc_grads);
  }
  encode_backward(st.model, enc, enc_grads, std::span<S>(grads));
  for (S g : grads)
    if (!std::isfinite(static_cast<double>(g))) throw NumericError("model_gradient", "non-finite gradient");
  adam_update(std::span<S>(st.model.values), std::span<const S>(grads), st.model_opt, cfg.lr, cfg.adam, t);

  st.step = t;
  m.step = t;
  return m;
}

/// Draws batch_size training indices (with replacement) from the state stream.
template <class S>
std::vector<std::size_t> draw_batch(TrainState<S>& st, std::size_t dataset_size, int batch_size) {
  if (dataset_size == 0) throw ConfigError("training split is empty");
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
  for (auto& i : idx) i = static_cast<std::size_t>(st.rng.below(dataset_size));
  return idx;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "MMCK", version byte 0x01, u32 header length, JSON header, float32 model
// parameters in layout order; train checkpoints then append float32
// discriminator parameters, Adam m and v for the model, Adam m and v for the
// discriminator, u64 step, u32 length + generator state text. CRC-64 last.

inline constexpr std::uint8_t kCheckpointVersion = 0x01;

namespace detail {

template <class S>
void write_header(ByteWriter& w, const json& header) {
  const std::string text = header.dump();
  w.bytes("MMCK");
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
}

inline json read_header(ByteReader& r) {
  r.expect_magic("MMCK");
  if (const auto v = r.u8(); v != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  const std::uint32_t len = r.u32();
  if (len > r.remaining()) throw FormatError("checkpoint: truncated header");
  try {
    return json::parse(r.string(len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
}

template <class S>
ModelParams<S> model_from_header(const json& header) {
  ModelConfig cfg;
  try {
    cfg = header.at("model").get<ModelConfig>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
  }
  ModelParams<S> p{cfg, make_layout(cfg), {}};
  p.values.assign(p.layout.params.total(), S(0));
  if (header.value("param_count", std::size_t{0}) != p.values.size())
    throw FormatError("checkpoint: parameter count does not match model config");
  return p;
}

}  // namespace detail

template <class S>
std::vector<std::uint8_t> encode_model(const ModelParams<S>& p) {
  ByteWriter w;
  detail::write_header<S>(w, json{{"kind", "model"}, {"model", p.config}, {"param_count", p.values.size()}});
  w.f32_array(std::span<const S>(p.values));
  w.seal();
  return w.buffer();
}

template <class S>
std::vector<std::uint8_t> encode_checkpoint(const TrainState<S>& st) {
  ByteWriter w;
  detail::write_header<S>(w, json{{"kind", "train"},
                                  {"model", st.model.config},
                                  {"param_count", st.model.values.size()},
                                  {"discriminator", st.disc.config},
                                  {"disc_param_count", st.disc.values.size()},
                                  {"step", st.step}});
  w.f32_array(std::span<const S>(st.model.values));
  w.f32_array(std::span<const S>(st.disc.values));
  w.f32_array(std::span<const S>(st.model_opt.m));
  w.f32_array(std::span<const S>(st.model_opt.v));
  w.f32_array(std::span<const S>(st.disc_opt.m));
  w.f32_array(std::span<const S>(st.disc_opt.v));
  w.u64(st.step);
  const std::string rng = st.rng.state();
  w.u32(static_cast<std::uint32_t>(rng.size()));
  w.bytes(rng);
  w.seal();
  return w.buffer();
}

/// Reads the model parameters from either a model or a train checkpoint.
template <class S>
ModelParams<S> decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  const json header = detail::read_header(r);
  ModelParams<S> p = detail::model_from_header<S>(header);
  r.f32_array(std::span<S>(p.values));
  if (header.value("kind", "") == "model") {
    r.verify_seal();
  } else {
    // Train checkpoint: skip the optimizer sections, check the CRC over everything.
    const std::size_t body = bytes.size() - 8;
    if (bytes.size() < r.position() + 8) throw FormatError("checkpoint: truncated");
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (crc64(bytes.subspan(0, body)) != stored) throw FormatError("checkpoint: CRC mismatch");
  }
  return p;
}

template <class S>
TrainState<S> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  const json header = detail::read_header(r);
  if (header.value("kind", "") != "train") throw FormatError("checkpoint: not a training checkpoint");
  TrainState<S> st;
  st.model = detail::model_from_header<S>(header);
  DiscriminatorConfig dcfg;
  try {
    dcfg = header.at("discriminator").get<DiscriminatorConfig>();
    st.step = header.at("step").get<std::uint64_t>();
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  st.disc = init_discriminator<S>(dcfg);
  if (header.value("disc_param_count", std::size_t{0}) != st.disc.values.size())
    throw FormatError("checkpoint: discriminator parameter count does not match its config");
  st.model_opt = AdamState<S>(st.model.size());
  st.disc_opt = AdamState<S>(st.disc.size());
  r.f32_array(std::span<S>(st.model.values));
  r.f32_array(std::span<S>(st.disc.values));
  r.f32_array(std::span<S>(st.model_opt.m));
  r.f32_array(std::span<S>(st.model_opt.v));
  r.f32_array(std::span<S>(st.disc_opt.m));
  r.f32_array(std::span<S>(st.disc_opt.v));
  if (r.u64() != st.step) throw FormatError("checkpoint: step field disagrees with header");
  const std::uint32_t len = r.u32();
  st.rng.set_state(r.string(len));
  r.verify_seal();
  return st;
}

template <class S>
void save_checkpoint(const TrainState<S>& st, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(st));
}

template <class S>
TrainState<S> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<S>(read_file_bytes(path));
}

template <class S>
void save_model(const ModelParams<S>& p, const std::filesystem::path& path) {
  write_file_bytes(path, encode_model(p));
}

template <class S>
ModelParams<S> load_model(const std::filesystem::path& path) {
  return decode_model<S>(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<StepMetrics> metrics;  // steps run by this call
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06llu.mmck", static_cast<unsigned long long>(step));
  return dir / buf;
}

/// Loads and preprocesses the training split to the model's input size.
inline std::vector<MultiModalSample> load_training_samples(const Dataset& d, const ModelConfig& m) {
  auto samples = load_split(d, d.train);
  for (auto& s : samples) {
    if (s.channels != m.channels) throw ConfigError("sample " + s.id + " channel count does not match the model");
    s = preprocess(s, m.height, m.width);
  }
  return samples;
}

/// Runs training from `state` until state.step == cfg.steps, writing
/// metrics.jsonl, periodic checkpoints and final.mmck under cfg.out_dir.
/// Metrics lines past the starting step are discarded first, so a resumed run
/// produces the same log as an uninterrupted one.
template <class S>
TrainResult train_from(TrainState<S>& st, const std::vector<MultiModalSample>& samples, const TrainConfig& cfg,
                       const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  const std::filesystem::path out(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  const auto metrics_path = out / "metrics.jsonl";
  std::vector<std::string> kept;
  if (st.step > 0 && std::filesystem::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (json::parse(line).at("step").get<std::uint64_t>() <= st.step) kept.push_back(line);
    }
  }
  std::ofstream log(metrics_path, std::ios::trunc);
  if (!log) throw IoError("cannot open " + metrics_path.string());
  for (const auto& line : kept) log << line << '\n';

  TrainResult result;
  std::vector<const MultiModalSample*> batch(static_cast<std::size_t>(cfg.batch_size));
  while (st.step < static_cast<std::uint64_t>(cfg.steps)) {
    const auto idx = draw_batch(st, samples.size(), cfg.batch_size);
    for (std::size_t k = 0; k < idx.size(); ++k) batch[k] = &samples[idx[k]];
    const StepMetrics m = train_step(st, std::span<const MultiModalSample* const>(batch), cfg);
    log << to_json_value(m).dump() << '\n';
    result.metrics.push_back(m);
    if (on_step) on_step(m);
    if (cfg.checkpoint_interval > 0 && st.step % static_cast<std::uint64_t>(cfg.checkpoint_interval) == 0 &&
        st.step < static_cast<std::uint64_t>(cfg.steps))
      save_checkpoint(st, checkpoint_path(out, st.step));
  }
  log.flush();
  if (!log) throw IoError("write failed: " + metrics_path.string());
  result.final_checkpoint = out / "final.mmck";
  save_checkpoint(st, result.final_checkpoint);
  return result;
}

/// Trains on the dataset named in cfg, starting fresh or from a checkpoint.
template <class S = float>
TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg, const DiscriminatorConfig& disc_cfg,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  model_cfg.validate();
  const Dataset data = load_dataset(cfg.dataset);
  const auto samples = load_training_samples(data, model_cfg);
  TrainState<S> st = resume ? load_checkpoint<S>(*resume) : make_train_state<S>(model_cfg, disc_cfg, cfg.seed);
  if (resume && !(st.model.config == model_cfg)) throw ConfigError("resume: checkpoint model config differs");
  return train_from(st, samples, cfg, on_step);
}

}  // namespace modalseg

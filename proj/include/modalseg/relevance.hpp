#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modalseg/binary_io.hpp"
#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/model.hpp"

// Weight of evidence of an input channel for a class, per pixel:
//   WE = log2 odds(p_full) - log2 odds(p_without_channel),  odds(p) = p / (1 - p)
// with probabilities clipped to [eps, 1 - eps]. Positive values mean the
// channel supports the class at that pixel.

namespace modalseg {

struct OddsConfig {
  double eps = 1e-6;

  void validate() const {
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("odds: eps must be in (0, 0.5)");
  }
};

inline void to_json(json& j, const OddsConfig& c) { j = {{"eps", c.eps}}; }

inline void from_json(const json& j, OddsConfig& c) {
  reject_unknown_keys(j, {"eps"}, "odds");
  read_optional(j, "eps", c.eps, "odds");
}

inline double odds(double p, const OddsConfig& cfg = {}) {
  const double q = std::clamp(p, cfg.eps, 1.0 - cfg.eps);
  return q / (1.0 - q);
}

inline double weight_of_evidence(double p_full, double p_missing, const OddsConfig& cfg = {}) {
  return std::log2(odds(p_full, cfg)) - std::log2(odds(p_missing, cfg));
}

/// Largest |WE| reachable after clipping: 2 log2((1 - eps) / eps).
inline double weight_of_evidence_bound(const OddsConfig& cfg = {}) {
  return 2.0 * std::log2((1.0 - cfg.eps) / cfg.eps);
}

/// Row-major H x W signed map.
struct EvidenceMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  friend bool operator==(const EvidenceMap&, const EvidenceMap&) = default;
};

/// Elementwise WE from two probability maps of equal size.
inline EvidenceMap evidence_from_probabilities(std::span<const double> p_full, std::span<const double> p_missing,
                                               int height, int width, const OddsConfig& cfg = {}) {
  if (p_full.size() != p_missing.size() || p_full.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError("weight_of_evidence: probability maps differ in size");
  EvidenceMap m{height, width, std::vector<double>(p_full.size())};
  for (std::size_t i = 0; i < p_full.size(); ++i) m.values[i] = weight_of_evidence(p_full[i], p_missing[i], cfg);
  return m;
}

namespace detail {
template <class S>
std::vector<double> class_plane(const Tensor<S>& probs, int cls) {
  const std::size_t plane = static_cast<std::size_t>(probs.plane());
  std::vector<double> out(plane);
  for (std::size_t j = 0; j < plane; ++j) out[j] = static_cast<double>(probs.data[cls * plane + j]);
  return out;
}
}  // namespace detail

/// WE map of channel c for class j on one preprocessed sample, from the
/// final-stage probabilities with all channels and without channel c.
template <class S>
EvidenceMap weight_of_evidence(const ModelParams<S>& p, const MultiModalSample& sample, int channel, int cls,
                               const OddsConfig& cfg = {}) {
  cfg.validate();
  const int C = p.config.channels;
  if (channel < 0 || channel >= C) throw ConfigError("weight_of_evidence: channel index out of range");
  if (cls < 0 || cls >= p.config.classes) throw ConfigError("weight_of_evidence: class index out of range");
  const Tensor<S> x = stack_images<S>(sample);
  const auto full = forward(p, x, ChannelMask::full(C));
  const auto missing = forward(p, x, ChannelMask::without(C, channel));
  return evidence_from_probabilities(detail::class_plane(full.final_probs(), cls),
                                     detail::class_plane(missing.final_probs(), cls), sample.height, sample.width, cfg);
}

/// (channel, class, pixel) WE values for one sample.
struct RelevanceMap {
  int channels = 0;
  int classes = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  EvidenceMap map(int c, int j) const {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    const auto begin = values.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(c) * classes + j) * plane);
    return {height, width, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(plane))};
  }

  friend bool operator==(const RelevanceMap&, const RelevanceMap&) = default;
};

template <class S>
RelevanceMap relevance_report(const ModelParams<S>& p, const MultiModalSample& sample, const OddsConfig& cfg = {}) {
  cfg.validate();
  const int C = p.config.channels, K = p.config.classes;
  const Tensor<S> x = stack_images<S>(sample);
  const auto full = forward(p, x, ChannelMask::full(C));
  RelevanceMap r{C, K, sample.height, sample.width, {}};
  r.values.reserve(static_cast<std::size_t>(C) * K * sample.plane());
  for (int c = 0; c < C; ++c) {
    const auto missing = forward(p, x, ChannelMask::without(C, c));
    for (int j = 0; j < K; ++j) {
      const auto m = evidence_from_probabilities(detail::class_plane(full.final_probs(), j),
                                                 detail::class_plane(missing.final_probs(), j), sample.height,
                                                 sample.width, cfg);
      r.values.insert(r.values.end(), m.values.begin(), m.values.end());
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Export

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Diverging colormap: t = clamp(v / scale, -1, 1); +1 red, 0 white, -1 blue.
inline Rgb evidence_color(double v, double scale) {
  const double t = std::clamp(v / scale, -1.0, 1.0);
  auto channel = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * x)); };
  if (t >= 0.0) return {255, channel(1.0 - t), channel(1.0 - t)};
  return {channel(1.0 + t), channel(1.0 + t), 255};
}

/// Binary PPM (P6) bytes, color scale set by the map's max |value| (at least 1e-9).
inline std::vector<std::uint8_t> encode_heatmap_ppm(const EvidenceMap& m) {
  double scale = 1e-9;
  for (double v : m.values) {
    if (!std::isfinite(v)) throw NumericError("export_heatmap", "non-finite evidence value");
    scale = std::max(scale, std::abs(v));
  }
  const std::string header = "P6\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * m.values.size());
  for (double v : m.values) {
    const Rgb c = evidence_color(v, scale);
    out.insert(out.end(), {c.r, c.g, c.b});
  }
  return out;
}

/// Raw dump: "WEMP", u32 H, u32 W, u32 reserved (0), then H*W float32 row-major.
inline std::vector<std::uint8_t> encode_evidence_raw(const EvidenceMap& m) {
  ByteWriter w;
  w.bytes("WEMP");
  w.u32(static_cast<std::uint32_t>(m.height));
  w.u32(static_cast<std::uint32_t>(m.width));
  w.u32(0);
  w.f32_array(std::span<const double>(m.values));
  return w.buffer();
}

inline EvidenceMap decode_evidence_raw(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "evidence map");
  r.expect_magic("WEMP");
  EvidenceMap m;
  m.height = static_cast<int>(r.u32());
  m.width = static_cast<int>(r.u32());
  r.u32();
  const std::size_t n = static_cast<std::size_t>(m.height) * m.width;
  if (r.remaining() != n * sizeof(float)) throw FormatError("evidence map: payload does not match header");
  m.values.resize(n);
  r.f32_array(std::span<double>(m.values));
  return m;
}

/// Writes <stem>.ppm and <stem>.wemp.
inline void export_heatmap(const EvidenceMap& m, const std::filesystem::path& stem) {
  const auto ppm = encode_heatmap_ppm(m);
  write_file_bytes(std::filesystem::path(stem.string() + ".ppm"), ppm);
  write_file_bytes(std::filesystem::path(stem.string() + ".wemp"), encode_evidence_raw(m));
}

inline std::string heatmap_stem(const std::string& sample_id, int channel, int cls) {
  return sample_id + "_" + kChannelNames.at(channel) + "_" + kClassNames.at(cls);
}

}  // namespace modalseg

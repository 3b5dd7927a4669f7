#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modalseg/binary_io.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/rng.hpp"

namespace modalseg {

// Channel order used throughout: pseudo T1, T1c, T2, FLAIR.
inline const std::array<std::string, 4> kChannelNames{"T1", "T1c", "T2", "FLAIR"};
inline constexpr int kT1 = 0;
inline constexpr int kT1c = 1;
inline constexpr int kT2 = 2;
inline constexpr int kFlair = 3;

// Canonical class indices. Raw BraTS labels {0,1,2,4} map to {0,1,2,3}.
inline const std::array<std::string, 4> kClassNames{"BG", "NCR", "ED", "ET"};
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kNecrotic = 1;
inline constexpr std::uint8_t kEdema = 2;
inline constexpr std::uint8_t kEnhancing = 3;

/// Maps a raw BraTS label (0, 1, 2, 4) to its canonical class index.
inline std::uint8_t canonical_label(int raw) {
  switch (raw) {
    case 0: return kBackground;
    case 1: return kNecrotic;
    case 2: return kEdema;
    case 4: return kEnhancing;
    default: throw FormatError("unknown raw label " + std::to_string(raw));
  }
}

/// C aligned single-channel images plus a label map, all H x W.
struct MultiModalSample {
  std::string id;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;         // channel-major, row-major
  std::vector<std::uint8_t> labels;  // row-major class indices

  MultiModalSample() = default;
  MultiModalSample(std::string id_, int c, int h, int w)
      : id(std::move(id_)), channels(c), height(h), width(w),
        pixels(static_cast<std::size_t>(c) * h * w, 0.0f), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::span<float> channel(int c) { return {pixels.data() + c * plane(), plane()}; }
  std::span<const float> channel(int c) const { return {pixels.data() + c * plane(), plane()}; }

  void validate() const {
    if (channels <= 0 || height <= 0 || width <= 0) throw ShapeError("sample " + id + ": empty dimensions");
    if (pixels.size() != static_cast<std::size_t>(channels) * plane() || labels.size() != plane())
      throw ShapeError("sample " + id + ": buffers do not match dimensions");
    for (auto l : labels)
      if (l > kEnhancing) throw FormatError("sample " + id + ": label index out of range");
  }

  friend bool operator==(const MultiModalSample&, const MultiModalSample&) = default;
};

/// Subset of channels available to the network.
struct ChannelMask {
  std::vector<bool> available;

  static ChannelMask full(int channels) { return {std::vector<bool>(channels, true)}; }
  static ChannelMask without(int channels, int dropped) {
    ChannelMask m = full(channels);
    m.available.at(dropped) = false;
    return m;
  }
  static ChannelMask only(int channels, int kept) {
    ChannelMask m{std::vector<bool>(channels, false)};
    m.available.at(kept) = true;
    return m;
  }

  int size() const { return static_cast<int>(available.size()); }
  bool operator[](int c) const { return available[c]; }
  int count() const { return static_cast<int>(std::count(available.begin(), available.end(), true)); }
  bool is_full() const { return count() == size(); }

  void validate(int channels) const {
    if (size() != channels) throw ShapeError("channel mask length does not match channel count");
    if (count() == 0) throw ConfigError("channel mask has no available channel");
  }

  friend bool operator==(const ChannelMask&, const ChannelMask&) = default;
};

/// Region intensity offsets (relative to the background mean) per channel role.
struct ContrastSpec {
  double background = -0.5;
  double flair_wt = 0.3;  // pseudo-FLAIR, whole tumor
  double t2_scale = 0.6;  // pseudo-T2 whole tumor contrast = flair_wt * t2_scale
  double t1c_tc = 0.3;    // pseudo-T1c, tumor core outside the enhancing core
  double t1c_ec = 0.6;    // pseudo-T1c, enhancing core
  double t1_tc = 0.1;     // pseudo-T1, tumor core

  friend bool operator==(const ContrastSpec&, const ContrastSpec&) = default;
};

struct SyntheticSpec {
  int count = 500;
  int height = 64;
  int width = 64;
  double noise_sigma = 0.05;
  double train_fraction = 0.8;
  ContrastSpec contrast;
  std::uint64_t seed = 0;

  void validate() const {
    if (count <= 0) throw ConfigError("synthetic spec: count must be positive");
    if (height < 32 || width < 32) throw ConfigError("synthetic spec: height and width must be at least 32");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
      throw ConfigError("synthetic spec: noise_sigma must be a finite nonnegative number");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0))
      throw ConfigError("synthetic spec: train_fraction must be in (0, 1]");
    const double floor = 4.0 * noise_sigma;
    const auto& k = contrast;
    if (k.flair_wt < floor) throw ConfigError("synthetic spec: FLAIR whole-tumor contrast below 4 sigma");
    if (k.t1c_tc < floor || k.t1c_ec - k.t1c_tc < floor)
      throw ConfigError("synthetic spec: T1c core contrasts below 4 sigma");
    if (!(k.t2_scale > 0.0 && k.t2_scale < 1.0)) throw ConfigError("synthetic spec: t2_scale must be in (0, 1)");
    if (k.t1_tc < 0.0) throw ConfigError("synthetic spec: t1_tc must be nonnegative");
  }
};

struct Ellipse {
  double cx = 0, cy = 0;  // pixel coordinates of the center
  double a = 1, b = 1;    // semi-axes
  double angle = 0;       // radians

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / a;
    const double v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

/// Region geometry of a generated sample. Membership of pixel (x, y) is tested at
/// its center (x + 0.5, y + 0.5); TC is clipped to WT and EC to TC.
struct TumorGeometry {
  Ellipse whole, core, enhancing;

  bool in_whole(int x, int y) const { return whole.contains(x + 0.5, y + 0.5); }
  bool in_core(int x, int y) const { return in_whole(x, y) && core.contains(x + 0.5, y + 0.5); }
  bool in_enhancing(int x, int y) const { return in_core(x, y) && enhancing.contains(x + 0.5, y + 0.5); }

  std::uint8_t label(int x, int y) const {
    if (!in_whole(x, y)) return kBackground;
    if (!in_core(x, y)) return kEdema;
    if (!in_enhancing(x, y)) return kNecrotic;
    return kEnhancing;
  }
};

struct SyntheticSample {
  MultiModalSample sample;
  TumorGeometry geometry;
};

inline std::string synthetic_sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%05d", index);
  return buf;
}

/// Generates one sample. Each sample uses its own derived random stream, so a
/// sample does not depend on how many others are generated.
inline SyntheticSample synthesize_sample(const SyntheticSpec& spec, int index) {
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const double scale = std::min(spec.height, spec.width) / 64.0;
  TumorGeometry g;
  g.whole.cx = rng.uniform(0.35, 0.65) * spec.width;
  g.whole.cy = rng.uniform(0.35, 0.65) * spec.height;
  g.whole.a = rng.uniform(10.0, 18.0) * scale;
  g.whole.b = rng.uniform(10.0, 18.0) * scale;
  g.whole.angle = rng.uniform(0.0, std::numbers::pi);

  const double core_shift = 0.2 * std::min(g.whole.a, g.whole.b);
  g.core.cx = g.whole.cx + rng.uniform(-core_shift, core_shift);
  g.core.cy = g.whole.cy + rng.uniform(-core_shift, core_shift);
  g.core.a = g.whole.a * rng.uniform(0.45, 0.7);
  g.core.b = g.whole.b * rng.uniform(0.45, 0.7);
  g.core.angle = rng.uniform(0.0, std::numbers::pi);

  const double ec_shift = 0.2 * std::min(g.core.a, g.core.b);
  g.enhancing.cx = g.core.cx + rng.uniform(-ec_shift, ec_shift);
  g.enhancing.cy = g.core.cy + rng.uniform(-ec_shift, ec_shift);
  g.enhancing.a = g.core.a * rng.uniform(0.4, 0.65);
  g.enhancing.b = g.core.b * rng.uniform(0.4, 0.65);
  g.enhancing.angle = rng.uniform(0.0, std::numbers::pi);

  MultiModalSample s(synthetic_sample_id(index), 4, spec.height, spec.width);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) s.labels[static_cast<std::size_t>(y) * spec.width + x] = g.label(x, y);

  const auto& k = spec.contrast;
  for (int c = 0; c < 4; ++c) {
    auto img = s.channel(c);
    for (std::size_t p = 0; p < s.plane(); ++p) {
      const std::uint8_t l = s.labels[p];
      const bool wt = l != kBackground;
      const bool tc = l == kNecrotic || l == kEnhancing;
      const bool ec = l == kEnhancing;
      double v = k.background;
      switch (c) {
        case kT1: v += tc ? k.t1_tc : 0.0; break;
        case kT1c: v += ec ? k.t1c_ec : (tc ? k.t1c_tc : 0.0); break;
        case kT2: v += wt ? k.flair_wt * k.t2_scale : 0.0; break;
        case kFlair: v += wt ? k.flair_wt : 0.0; break;
      }
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
      img[p] = static_cast<float>(v);
    }
  }
  return {std::move(s), g};
}

/// Per-channel affine min-max map onto [-1, 1]. Constant channels become zeros.
inline MultiModalSample normalize_channels(MultiModalSample sample) {
  for (int c = 0; c < sample.channels; ++c) {
    auto img = sample.channel(c);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (float v : img) {
      if (!std::isfinite(v)) throw NumericError("normalize_channels", "non-finite value in sample " + sample.id);
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
    const double range = hi - lo;
    for (float& v : img) v = range > 0.0 ? static_cast<float>(2.0 * (v - lo) / range - 1.0) : 0.0f;
  }
  return sample;
}

/// Centered crop of a row-major h x w image. Odd margins put the extra row or
/// column at the bottom or right.
template <class T>
std::vector<T> center_crop(std::span<const T> image, int h, int w, int out_h, int out_w) {
  if (static_cast<std::size_t>(h) * w != image.size()) throw ShapeError("center_crop: image size mismatch");
  if (out_h <= 0 || out_w <= 0 || out_h > h || out_w > w)
    throw ShapeError("center_crop: window " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " does not fit in " + std::to_string(h) + "x" + std::to_string(w));
  const int top = (h - out_h) / 2, left = (w - out_w) / 2;
  std::vector<T> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    std::copy_n(image.begin() + static_cast<std::ptrdiff_t>(top + y) * w + left, out_w,
                out.begin() + static_cast<std::ptrdiff_t>(y) * out_w);
  return out;
}

inline MultiModalSample center_crop(const MultiModalSample& s, int out_h, int out_w) {
  if (out_h == s.height && out_w == s.width) return s;
  MultiModalSample out(s.id, s.channels, out_h, out_w);
  for (int c = 0; c < s.channels; ++c) {
    const auto cropped = center_crop<float>(s.channel(c), s.height, s.width, out_h, out_w);
    std::copy(cropped.begin(), cropped.end(), out.channel(c).begin());
  }
  out.labels = center_crop<std::uint8_t>(s.labels, s.height, s.width, out_h, out_w);
  return out;
}

/// Crop to the network input size, then normalize.
inline MultiModalSample preprocess(const MultiModalSample& s, int out_h, int out_w) {
  return normalize_channels(center_crop(s, out_h, out_w));
}

// ---------------------------------------------------------------------------
// Sample file: "MMSG" 0x01, u32 C, u32 H, u32 W, C*H*W float32, H*W uint8, CRC-64.

inline std::vector<std::uint8_t> encode_sample(const MultiModalSample& s) {
  s.validate();
  ByteWriter w;
  w.bytes("MMSG");
  w.u8(0x01);
  w.u32(static_cast<std::uint32_t>(s.channels));
  w.u32(static_cast<std::uint32_t>(s.height));
  w.u32(static_cast<std::uint32_t>(s.width));
  w.f32_array(std::span<const float>(s.pixels));
  w.u8_array(s.labels);
  w.seal();
  return w.buffer();
}

inline MultiModalSample decode_sample(std::span<const std::uint8_t> bytes, std::string id) {
  ByteReader r(bytes, "sample " + id);
  r.expect_magic("MMSG");
  if (const auto v = r.u8(); v != 0x01) throw FormatError("sample " + id + ": unsupported version " + std::to_string(v));
  const std::uint32_t c = r.u32(), h = r.u32(), w = r.u32();
  if (c == 0 || h == 0 || w == 0 || c > 64 || h > 16384 || w > 16384)
    throw FormatError("sample " + id + ": implausible header dimensions");
  const std::size_t payload = static_cast<std::size_t>(c) * h * w * 4 + static_cast<std::size_t>(h) * w + 8;
  if (r.remaining() < payload) throw FormatError("sample " + id + ": truncated payload");
  if (r.remaining() > payload) throw FormatError("sample " + id + ": payload longer than header dimensions");
  MultiModalSample s(std::move(id), static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  r.f32_array(std::span<float>(s.pixels));
  r.u8_array(s.labels);
  r.verify_seal();
  s.validate();
  return s;
}

inline void write_sample(const MultiModalSample& s, const std::filesystem::path& path) {
  write_file_bytes(path, encode_sample(s));
}

inline MultiModalSample read_sample(const std::filesystem::path& path) {
  return decode_sample(read_file_bytes(path), path.stem().string());
}

// ---------------------------------------------------------------------------
// Dataset: a directory holding one .mmsg file per sample plus manifest.json.

struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> channels{kChannelNames.begin(), kChannelNames.end()};
  std::vector<std::string> train;
  std::vector<std::string> test;

  std::filesystem::path sample_path(const std::string& id) const { return root / (id + ".mmsg"); }

  void validate() const {
    std::vector<std::string> a = train, b = test, both;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    if (!both.empty()) throw FormatError("manifest: sample " + both.front() + " is in both train and test");
    if (std::adjacent_find(a.begin(), a.end()) != a.end() || std::adjacent_find(b.begin(), b.end()) != b.end())
      throw FormatError("manifest: duplicate sample id");
  }
};

inline nlohmann::json manifest_json(const Dataset& d) {
  return {{"channels", d.channels}, {"train", d.train}, {"test", d.test}};
}

inline void write_manifest(const Dataset& d) {
  write_text_file(d.root / "manifest.json", manifest_json(d).dump(2) + "\n");
}

/// Reads manifest.json under root and checks every listed sample file exists.
inline Dataset load_dataset(const std::filesystem::path& root) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(root / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
  Dataset d;
  d.root = root;
  try {
    d.channels = j.at("channels").get<std::vector<std::string>>();
    d.train = j.at("train").get<std::vector<std::string>>();
    d.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
  d.validate();
  for (const auto* split : {&d.train, &d.test})
    for (const auto& id : *split)
      if (!std::filesystem::is_regular_file(d.sample_path(id)))
        throw IoError("manifest entry " + id + " has no sample file under " + root.string());
  return d;
}

inline std::vector<MultiModalSample> load_split(const Dataset& d, const std::vector<std::string>& ids) {
  std::vector<MultiModalSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    out.push_back(read_sample(d.sample_path(id)));
    out.back().id = id;
  }
  return out;
}

/// Deterministic train/test split of sample ids; both lists come back sorted.
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_ids(std::vector<std::string> ids,
                                                                               double train_fraction,
                                                                               std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xD5A7ULL << 32));
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
  std::vector<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::string> test(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

/// Writes spec.count synthetic samples and a manifest under root.
inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& root) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  std::vector<std::string> ids;
  for (int i = 0; i < spec.count; ++i) {
    auto gen = synthesize_sample(spec, i);
    ids.push_back(gen.sample.id);
    write_sample(gen.sample, root / (gen.sample.id + ".mmsg"));
  }
  Dataset d;
  d.root = root;
  std::tie(d.train, d.test) = split_ids(std::move(ids), spec.train_fraction, spec.seed);
  write_manifest(d);
  return d;
}

}  // namespace modalseg

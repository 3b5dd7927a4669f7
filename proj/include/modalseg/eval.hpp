#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/model.hpp"

namespace modalseg {

enum class Region { WT, TC, EC };

inline constexpr std::array<Region, 3> kRegions{Region::WT, Region::TC, Region::EC};

inline const char* region_name(Region r) {
  switch (r) {
    case Region::WT: return "WT";
    case Region::TC: return "TC";
    case Region::EC: return "EC";
  }
  return "?";
}

/// Whether canonical class `cls` belongs to the composite region:
/// WT = {1, 2, 3}, TC = {1, 3}, EC = {3}.
inline bool region_contains(Region r, std::uint8_t cls) {
  if (cls > kEnhancing) throw FormatError("region_mask: class index " + std::to_string(cls) + " out of range");
  switch (r) {
    case Region::WT: return cls != kBackground;
    case Region::TC: return cls == kNecrotic || cls == kEnhancing;
    case Region::EC: return cls == kEnhancing;
  }
  return false;
}

inline std::vector<std::uint8_t> region_mask(std::span<const std::uint8_t> labels, Region r) {
  std::vector<std::uint8_t> m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) m[i] = region_contains(r, labels[i]) ? 1 : 0;
  return m;
}

/// 2|P and G| / (|P| + |G|); 1 when both masks are empty.
inline double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = truth[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Per-pixel argmax of a (K, N, H, W) probability tensor for sample n; ties go
/// to the lower class index.
template <class S>
std::vector<std::uint8_t> argmax_labels(const Tensor<S>& probs, int n) {
  const std::size_t plane = static_cast<std::size_t>(probs.plane());
  const std::size_t stride = static_cast<std::size_t>(probs.cols());
  std::vector<std::uint8_t> out(plane);
  for (std::size_t j = 0; j < plane; ++j) {
    const std::size_t col = static_cast<std::size_t>(n) * plane + j;
    int best = 0;
    for (int k = 1; k < probs.c; ++k)
      if (probs.data[k * stride + col] > probs.data[best * stride + col]) best = k;
    out[j] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Final-stage label maps for a batch of preprocessed samples.
template <class S>
std::vector<std::vector<std::uint8_t>> predict_labels(const ModelParams<S>& p,
                                                      std::span<const MultiModalSample* const> samples,
                                                      const ChannelMask& mask) {
  const auto pred = forward(p, stack_images<S>(samples), mask);
  std::vector<std::vector<std::uint8_t>> out;
  for (int n = 0; n < static_cast<int>(samples.size()); ++n) out.push_back(argmax_labels(pred.final_probs(), n));
  return out;
}

template <class S>
std::vector<std::uint8_t> predict_labels(const ModelParams<S>& p, const MultiModalSample& s, const ChannelMask& mask) {
  const MultiModalSample* one[] = {&s};
  return predict_labels(p, std::span<const MultiModalSample* const>(one), mask).front();
}

// ---------------------------------------------------------------------------
// Full-vs-missing-channel Dice matrix

struct DiceCell {
  double mean = 0.0;
  std::size_t slices = 0;

  friend bool operator==(const DiceCell&, const DiceCell&) = default;
};

struct DiceRow {
  std::string name;  // "full" or "missing-<channel>"
  ChannelMask mask;
  std::array<DiceCell, 3> cells;  // WT, TC, EC

  friend bool operator==(const DiceRow&, const DiceRow&) = default;
};

struct DiceReport {
  std::vector<DiceRow> rows;

  const DiceRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw ConfigError("dice report has no row " + name);
  }
  double at(const std::string& name, Region r) const { return row(name).cells[static_cast<int>(r)].mean; }

  friend bool operator==(const DiceReport&, const DiceReport&) = default;
};

/// Row names in report order: full, then one missing-channel row per channel.
inline std::vector<std::string> report_row_names(int channels = 4) {
  std::vector<std::string> names{"full"};
  for (int c = 0; c < channels; ++c) names.push_back("missing-" + kChannelNames.at(c));
  return names;
}

inline ChannelMask mask_for_row(const std::string& name, int channels) {
  if (name == "full") return ChannelMask::full(channels);
  for (int c = 0; c < channels; ++c)
    if (name == "missing-" + kChannelNames.at(c)) return ChannelMask::without(channels, c);
  throw ConfigError("unknown mask row \"" + name + "\"; expected full or missing-<T1|T1c|T2|FLAIR>");
}

/// Mean slice-level Dice per region for each requested row (all five by
/// default). Samples are reduced in sample-id order.
template <class S>
DiceReport evaluate_matrix(const ModelParams<S>& p, std::span<const MultiModalSample> test,
                           std::optional<std::vector<std::string>> row_names = std::nullopt, int batch_size = 16) {
  if (test.empty()) throw ConfigError("evaluate_matrix: empty test set");
  const int C = p.config.channels;
  std::vector<const MultiModalSample*> ordered;
  for (const auto& s : test) ordered.push_back(&s);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->id < b->id; });

  DiceReport report;
  for (const auto& name : row_names.value_or(report_row_names(C))) {
    DiceRow row{name, mask_for_row(name, C), {}};
    std::array<double, 3> sums{};
    for (std::size_t start = 0; start < ordered.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(ordered.size(), start + static_cast<std::size_t>(batch_size));
      const std::span<const MultiModalSample* const> chunk(ordered.data() + start, end - start);
      const auto predicted = predict_labels(p, chunk, row.mask);
      for (std::size_t k = 0; k < chunk.size(); ++k)
        for (int r = 0; r < 3; ++r)
          sums[r] += dice(region_mask(predicted[k], kRegions[r]), region_mask(chunk[k]->labels, kRegions[r]));
    }
    for (int r = 0; r < 3; ++r) row.cells[r] = {sums[r] / static_cast<double>(ordered.size()), ordered.size()};
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr const char* kEmptyMaskNote = "empty-mask convention: both empty -> 1.0, one empty -> 0.0";

inline std::string format3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string render_text(const DiceReport& r) {
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-15s %7s %7s %7s %8s\n", "mask", "WT", "TC", "EC", "slices");
  os << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-15s %7s %7s %7s %8zu\n", row.name.c_str(), format3(row.cells[0].mean).c_str(),
                  format3(row.cells[1].mean).c_str(), format3(row.cells[2].mean).c_str(), row.cells[0].slices);
    os << line;
  }
  os << "Dice = mean over 2-D slices; " << kEmptyMaskNote << "\n";
  return os.str();
}

inline std::string render_csv(const DiceReport& r) {
  std::ostringstream os;
  os << "mask,WT,TC,EC,slices\n";
  for (const auto& row : r.rows)
    os << row.name << ',' << format3(row.cells[0].mean) << ',' << format3(row.cells[1].mean) << ','
       << format3(row.cells[2].mean) << ',' << row.cells[0].slices << '\n';
  return os.str();
}

/// JSON keeps full precision so that it parses back to an identical report.
inline json report_to_json(const DiceReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json jr{{"mask", row.name}};
    for (int k = 0; k < 3; ++k)
      jr[region_name(kRegions[k])] = {{"dice", row.cells[k].mean}, {"slices", row.cells[k].slices}};
    rows.push_back(std::move(jr));
  }
  return {{"columns", {"WT", "TC", "EC"}}, {"rows", rows}, {"note", kEmptyMaskNote}};
}

inline DiceReport report_from_json(const json& j, int channels = 4) {
  DiceReport r;
  try {
    for (const auto& jr : j.at("rows")) {
      DiceRow row;
      row.name = jr.at("mask").get<std::string>();
      row.mask = mask_for_row(row.name, channels);
      for (int k = 0; k < 3; ++k) {
        const auto& cell = jr.at(region_name(kRegions[k]));
        row.cells[k] = {cell.at("dice").get<double>(), cell.at("slices").get<std::size_t>()};
      }
      r.rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("dice report: ") + e.what());
  }
  return r;
}

inline std::string render_report(const DiceReport& r, const std::string& format) {
  if (format == "text") return render_text(r);
  if (format == "csv") return render_csv(r);
  if (format == "json") return report_to_json(r).dump(2) + "\n";
  throw ConfigError("unknown report format \"" + format + "\"; expected text, csv or json");
}

}  // namespace modalseg

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

#include "modalseg/binary_io.hpp"
#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/json_util.hpp"
#include "modalseg/losses.hpp"
#include "modalseg/model.hpp"
#include "modalseg/relevance.hpp"
#include "modalseg/trainer.hpp"

namespace modalseg {

inline void to_json(json& j, const ContrastSpec& c) {
  j = {{"background", c.background}, {"flair_wt", c.flair_wt}, {"t2_scale", c.t2_scale},
       {"t1c_tc", c.t1c_tc},         {"t1c_ec", c.t1c_ec},     {"t1_tc", c.t1_tc}};
}

inline void from_json(const json& j, ContrastSpec& c) {
  constexpr std::string_view s = "data.contrast";
  reject_unknown_keys(j, {"background", "flair_wt", "t2_scale", "t1c_tc", "t1c_ec", "t1_tc"}, s);
  read_optional(j, "background", c.background, s);
  read_optional(j, "flair_wt", c.flair_wt, s);
  read_optional(j, "t2_scale", c.t2_scale, s);
  read_optional(j, "t1c_tc", c.t1c_tc, s);
  read_optional(j, "t1c_ec", c.t1c_ec, s);
  read_optional(j, "t1_tc", c.t1_tc, s);
}

inline void to_json(json& j, const SyntheticSpec& d) {
  j = {{"count", d.count},
       {"height", d.height},
       {"width", d.width},
       {"noise_sigma", d.noise_sigma},
       {"train_fraction", d.train_fraction},
       {"contrast", d.contrast},
       {"seed", d.seed}};
}

inline void from_json(const json& j, SyntheticSpec& d) {
  constexpr std::string_view s = "data";
  reject_unknown_keys(j, {"count", "height", "width", "noise_sigma", "train_fraction", "contrast", "seed"}, s);
  read_optional(j, "count", d.count, s);
  read_optional(j, "height", d.height, s);
  read_optional(j, "width", d.width, s);
  read_optional(j, "noise_sigma", d.noise_sigma, s);
  read_optional(j, "train_fraction", d.train_fraction, s);
  if (j.contains("contrast")) from_json(j.at("contrast"), d.contrast);
  read_optional(j, "seed", d.seed, s);
}

/// Everything the command-line tool can configure. The JSON file has one
/// object per section: data, model, discriminator, train, loss, odds.
struct CliConfig {
  SyntheticSpec data;
  ModelConfig model;
  DiscriminatorConfig discriminator;  // only widths, slope and logit_clip are user-facing
  TrainConfig train;
  OddsConfig odds;
  bool seed_given = false;  // some section named a seed explicitly

  /// Discriminator config with the input geometry taken from the model.
  DiscriminatorConfig resolved_discriminator() const {
    DiscriminatorConfig d = DiscriminatorConfig::for_model(model);
    d.widths = discriminator.widths;
    d.slope = discriminator.slope;
    d.logit_clip = discriminator.logit_clip;
    d.seed = discriminator.seed;
    return d;
  }

  /// Uses one seed for data generation, initialization and sampling.
  void set_seed(std::uint64_t seed) {
    data.seed = seed;
    model.seed = seed;
    discriminator.seed = seed;
    train.seed = seed;
    seed_given = true;
  }

  void validate() const {
    data.validate();
    model.validate();
    resolved_discriminator().validate();
    train.validate();
    odds.validate();
    if (model.channels != 4) throw ConfigError("model.channels must be 4 for the T1/T1c/T2/FLAIR pipeline");
    if (model.classes != 4) throw ConfigError("model.classes must be 4 (BG, NCR, ED, ET)");
  }
};

inline CliConfig parse_cli_config(const json& j) {
  reject_unknown_keys(j, {"data", "model", "discriminator", "train", "loss", "odds"}, "config");
  CliConfig c;
  auto has_seed = [&](const char* section) { return j.contains(section) && j.at(section).contains("seed"); };
  try {
    if (j.contains("data")) c.data = j.at("data").get<SyntheticSpec>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("discriminator")) c.discriminator = j.at("discriminator").get<DiscriminatorConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("loss")) c.train.loss = j.at("loss").get<LossConfig>();
    if (j.contains("odds")) c.odds = j.at("odds").get<OddsConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.seed_given = has_seed("data") || has_seed("model") || has_seed("discriminator") || has_seed("train");
  return c;
}

inline CliConfig load_cli_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_cli_config(j);
}

inline json to_json_value(const CliConfig& c) {
  json d = c.discriminator;
  return {{"data", c.data}, {"model", c.model}, {"discriminator", d}, {"train", c.train},
          {"loss", c.train.loss}, {"odds", c.odds}};
}

/// MODALSEG_SEED, if set and numeric.
inline std::optional<std::uint64_t> seed_from_environment() {
  const char* v = std::getenv("MODALSEG_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw ConfigError("MODALSEG_SEED is not an unsigned integer");
  return static_cast<std::uint64_t>(s);
}

}  // namespace modalseg

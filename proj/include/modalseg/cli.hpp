#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "modalseg/config.hpp"
#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/eval.hpp"
#include "modalseg/relevance.hpp"
#include "modalseg/trainer.hpp"

// The modalseg command-line tool. Settings come from, lowest to highest
// precedence: built-in defaults, the --config JSON file, MODALSEG_SEED (only
// when neither the file nor --seed gives a seed), and command-line flags.

namespace modalseg::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4, kEvalFailure = 5 };

namespace detail {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string resume;
  std::string format = "text";
  std::vector<std::string> masks;
  std::string sample;
  std::string channel;
  std::string cls;
  std::optional<int> count;
  std::optional<int> steps;
  std::optional<int> batch;
  std::optional<int> checkpoint_interval;
  std::optional<double> lr;
  std::optional<double> d_lr;
  std::optional<double> alpha;
  std::optional<double> beta;
};

/// Config file, then environment seed, then flags. Validated before returning.
inline CliConfig resolve_config(const Options& o) {
  CliConfig c = o.config.empty() ? CliConfig{} : load_cli_config(o.config);
  if (o.seed) {
    c.set_seed(*o.seed);
  } else if (!c.seed_given) {
    if (auto env = seed_from_environment()) c.set_seed(*env);
  }
  if (o.count) c.data.count = *o.count;
  if (o.steps) c.train.steps = *o.steps;
  if (o.batch) c.train.batch_size = *o.batch;
  if (o.checkpoint_interval) c.train.checkpoint_interval = *o.checkpoint_interval;
  if (o.lr) c.train.lr = *o.lr;
  if (o.d_lr) c.train.d_lr = *o.d_lr;
  if (o.alpha) c.train.loss.alpha = *o.alpha;
  if (o.beta) c.train.loss.beta = *o.beta;
  if (!o.data.empty()) c.train.dataset = o.data;
  c.validate();
  return c;
}

inline int channel_index(const std::string& name) {
  for (int c = 0; c < static_cast<int>(kChannelNames.size()); ++c)
    if (kChannelNames[c] == name) return c;
  throw ConfigError("unknown channel \"" + name + "\"; valid names: T1, T1c, T2, FLAIR");
}

inline int class_index(const std::string& name) {
  for (int k = 0; k < static_cast<int>(kClassNames.size()); ++k)
    if (kClassNames[k] == name) return k;
  throw ConfigError("unknown class \"" + name + "\"; valid names: BG, NCR, ED, ET");
}

inline std::string require_dataset(const CliConfig& c) {
  if (c.train.dataset.empty()) throw ConfigError("no dataset given (use --data or train.dataset)");
  return c.train.dataset;
}

inline std::vector<MultiModalSample> load_test_samples(const Dataset& d, const ModelConfig& m) {
  auto samples = load_split(d, d.test);
  for (auto& s : samples) s = preprocess(s, m.height, m.width);
  return samples;
}

inline int cmd_gen_data(const Options& o, std::ostream& out) {
  const CliConfig c = resolve_config(o);
  if (o.out.empty()) throw ConfigError("gen-data: --out is required");
  const Dataset d = generate_synthetic_dataset(c.data, o.out);
  out << "wrote " << d.train.size() + d.test.size() << " samples to " << o.out << " (train " << d.train.size()
      << ", test " << d.test.size() << ", seed " << c.data.seed << ")\n";
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  CliConfig c = resolve_config(o);
  if (!o.out.empty()) c.train.out_dir = o.out;
  if (c.train.out_dir.empty()) throw ConfigError("train: --out (or train.out_dir) is required");
  const Dataset d = load_dataset(require_dataset(c));
  const auto samples = load_training_samples(d, c.model);
  TrainState<float> st = o.resume.empty()
                             ? make_train_state<float>(c.model, c.resolved_discriminator(), c.train.seed)
                             : load_checkpoint<float>(o.resume);
  if (!o.resume.empty() && !(st.model.config == c.model))
    throw ConfigError("train: checkpoint model config differs from the configured model");

  std::filesystem::create_directories(c.train.out_dir);
  write_text_file(std::filesystem::path(c.train.out_dir) / "config.json", to_json_value(c).dump(2) + "\n");
  const auto report_every = std::max(1, c.train.steps / 20);
  const auto result = train_from(st, samples, c.train, [&](const StepMetrics& m) {
    if (m.step % static_cast<std::uint64_t>(report_every) == 0 || m.step == static_cast<std::uint64_t>(c.train.steps))
      out << "step " << m.step << " loss_full " << m.loss_full << " loss_drop " << m.loss_drop << " d_loss "
          << m.d_loss << " g_loss " << m.g_loss << "\n";
  });
  out << "checkpoint " << result.final_checkpoint.string() << "\n";
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const CliConfig c = resolve_config(o);
  if (o.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  if (o.format != "text" && o.format != "csv" && o.format != "json")
    throw ConfigError("eval: unknown format \"" + o.format + "\"; expected text, csv or json");
  for (const auto& m : o.masks) mask_for_row(m, 4);
  const auto params = load_model<float>(o.checkpoint);
  const Dataset d = load_dataset(require_dataset(c));
  const auto test = load_test_samples(d, params.config);
  std::optional<std::vector<std::string>> rows;
  if (!o.masks.empty()) rows = o.masks;
  const DiceReport report = evaluate_matrix(params, std::span<const MultiModalSample>(test), rows);
  const std::string doc = render_report(report, o.format);
  if (o.out.empty()) {
    out << doc;
  } else {
    write_text_file(o.out, doc);
  }
  for (const auto& row : report.rows)
    for (const auto& cell : row.cells)
      if (std::isnan(cell.mean)) return kEvalFailure;
  return kOk;
}

inline int cmd_relevance(const Options& o, std::ostream& out) {
  const CliConfig c = resolve_config(o);
  if (o.checkpoint.empty()) throw ConfigError("relevance: --checkpoint is required");
  if (o.out.empty()) throw ConfigError("relevance: --out is required");
  std::vector<int> channels, classes;
  if (o.channel.empty()) {
    for (int k = 0; k < 4; ++k) channels.push_back(k);
  } else {
    channels.push_back(channel_index(o.channel));
  }
  if (o.cls.empty()) {
    for (int k = 0; k < 4; ++k) classes.push_back(k);
  } else {
    classes.push_back(class_index(o.cls));
  }
  const auto params = load_model<float>(o.checkpoint);
  const Dataset d = load_dataset(require_dataset(c));
  std::string id = o.sample;
  if (id.empty()) {
    if (d.test.empty()) throw ConfigError("relevance: dataset has no test samples; pass --sample");
    id = d.test.front();
  }
  if (!std::filesystem::is_regular_file(d.sample_path(id)))
    throw IoError("relevance: no sample " + id + " under " + d.root.string());
  MultiModalSample s = read_sample(d.sample_path(id));
  s.id = id;
  s = preprocess(s, params.config.height, params.config.width);

  std::filesystem::create_directories(o.out);
  int written = 0;
  for (int ch : channels) {
    for (int k : classes) {
      const EvidenceMap m = weight_of_evidence(params, s, ch, k, c.odds);
      export_heatmap(m, std::filesystem::path(o.out) / heatmap_stem(id, ch, k));
      ++written;
    }
  }
  out << "wrote " << written << " heatmaps for " << id << " to " << o.out << "\n";
  return kOk;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

/// Runs the tool on argv-style arguments (args[0] is the program name).
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  detail::Options o;
  const CliConfig defaults;
  CLI::App app{"Multi-channel segmentation with missing-channel training and relevance maps", "modalseg"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file (sections: data, model, discriminator, train, loss, odds)")
        ->default_str("none");
    sub->add_option("--seed", o.seed, "Seed for every random stream; falls back to MODALSEG_SEED when unset")
        ->default_str("from config, else MODALSEG_SEED, else 0 for data / 1 for training");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-channel dataset");
  add_common(gen);
  gen->add_option("--out", o.out, "Output directory")->default_str("required");
  gen->add_option("--count", o.count, "Number of samples")->default_str(std::to_string(defaults.data.count));

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes metrics.jsonl and checkpoints");
  add_common(train_cmd);
  train_cmd->add_option("--data", o.data, "Dataset directory (overrides train.dataset)")->default_str("train.dataset");
  train_cmd->add_option("--out", o.out, "Output directory (overrides train.out_dir)")->default_str("train.out_dir");
  train_cmd->add_option("--steps", o.steps, "Training steps")->default_str(std::to_string(defaults.train.steps));
  train_cmd->add_option("--batch", o.batch, "Batch size")->default_str(std::to_string(defaults.train.batch_size));
  train_cmd->add_option("--lr", o.lr, "Model learning rate")->default_str(detail::format_number(defaults.train.lr));
  train_cmd->add_option("--d-lr", o.d_lr, "Discriminator learning rate (0 freezes it)")
      ->default_str(detail::format_number(defaults.train.d_lr));
  train_cmd->add_option("--alpha", o.alpha, "Weight of the dropped-channel segmentation loss")
      ->default_str(detail::format_number(defaults.train.loss.alpha));
  train_cmd->add_option("--beta", o.beta, "Weight of the adversarial similarity loss (0 = baseline)")
      ->default_str(detail::format_number(defaults.train.loss.beta));
  train_cmd->add_option("--checkpoint-interval", o.checkpoint_interval, "Steps between checkpoints (0 = final only)")
      ->default_str(std::to_string(defaults.train.checkpoint_interval));
  train_cmd->add_option("--resume", o.resume, "Training checkpoint to continue from")->default_str("none");

  auto* eval_cmd = app.add_subcommand("eval", "Dice matrix over full and missing-channel inputs on the test split");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Model or training checkpoint")->default_str("required");
  eval_cmd->add_option("--data", o.data, "Dataset directory (overrides train.dataset)")->default_str("train.dataset");
  eval_cmd->add_option("--format", o.format, "Report format: text, csv or json");
  eval_cmd->add_option("--mask", o.masks, "Row(s) to evaluate: full, missing-T1, missing-T1c, missing-T2, missing-FLAIR")
      ->default_str("all five rows");
  eval_cmd->add_option("--out", o.out, "Write the report here instead of stdout")->default_str("stdout");

  auto* rel = app.add_subcommand("relevance", "Weight-of-evidence heatmaps for one sample");
  add_common(rel);
  rel->add_option("--checkpoint", o.checkpoint, "Model or training checkpoint")->default_str("required");
  rel->add_option("--data", o.data, "Dataset directory (overrides train.dataset)")->default_str("train.dataset");
  rel->add_option("--sample", o.sample, "Sample id")->default_str("first test sample");
  rel->add_option("--channel", o.channel, "Channel: T1, T1c, T2 or FLAIR")->default_str("all channels");
  rel->add_option("--class", o.cls, "Class: BG, NCR, ED or ET")->default_str("all classes");
  rel->add_option("--out", o.out, "Output directory for .ppm/.wemp files")->default_str("required");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "modalseg: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) return detail::cmd_gen_data(o, out);
    if (train_cmd->parsed()) return detail::cmd_train(o, out);
    if (eval_cmd->parsed()) return detail::cmd_eval(o, out);
    if (rel->parsed()) return detail::cmd_relevance(o, out);
  } catch (const ConfigError& e) {
    err << "modalseg: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "modalseg: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "modalseg: numeric failure in " << e.component() << ": " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "modalseg: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "modalseg: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "modalseg: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}

}  // namespace modalseg::cli

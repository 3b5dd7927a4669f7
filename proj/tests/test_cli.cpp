#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"

using namespace modalseg;
using namespace modalseg::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "modalseg");
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Small model and 32x32 data so that a few training steps take well under a second.
json small_config(std::uint64_t disc_seed = 3) {
  return {{"data", {{"count", 10}, {"height", 32}, {"width", 32}}},
          {"model", {{"height", 32}, {"width", 32}, {"levels", 2}, {"encoder_widths", {4, 8}}, {"bottleneck_width", 8}}},
          {"discriminator", {{"widths", {4, 8}}, {"seed", disc_seed}}},
          {"train", {{"batch_size", 2}, {"checkpoint_interval", 0}}}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch_dir("cli"));
    write_text_file(*root_ / "cfg.json", small_config().dump());
    const auto r = run({"gen-data", "--config", cfg(), "--seed", "7", "--out", data()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = run({"train", "--config", cfg(), "--data", data(), "--out", (*root_ / "model").string(), "--steps",
                        "3", "--seed", "1"});
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() { delete root_; }

  static std::string cfg() { return (*root_ / "cfg.json").string(); }
  static std::string data() { return (*root_ / "data").string(); }
  static std::string model() { return (*root_ / "model" / "final.mmck").string(); }
  static fs::path dir(const std::string& name) { return *root_ / name; }

  static inline fs::path* root_ = nullptr;
};

std::size_t count_files(const fs::path& d) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(d)) ++n;
  return n;
}

TEST_F(Cli, GenDataSplitsEightyTwenty) {
  const Dataset d = load_dataset(data());
  EXPECT_EQ(d.train.size(), 8u);
  EXPECT_EQ(d.test.size(), 2u);
}

TEST_F(Cli, GenDataIsDeterministic) {
  const auto again = dir("data_again");
  ASSERT_EQ(run({"gen-data", "--config", cfg(), "--seed", "7", "--out", again.string()}).code, 0);
  for (const auto& e : fs::directory_iterator(data()))
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(again / e.path().filename())) << e.path();
}

TEST_F(Cli, GenDataWithoutOutIsUsageError) {
  const auto r = run({"gen-data", "--config", cfg()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
}

TEST_F(Cli, SeedFallsBackToEnvironment) {
  // The environment only applies when the file names no seed at all.
  json seedless = small_config();
  seedless["discriminator"].erase("seed");
  write_text_file(dir("seedless.json"), seedless.dump());
  ::setenv("MODALSEG_SEED", "7", 1);
  const auto r = run({"gen-data", "--config", dir("seedless.json").string(), "--out", dir("data_env").string()});
  ::unsetenv("MODALSEG_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("seed 7"), std::string::npos);
  for (const auto& e : fs::directory_iterator(data()))
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(dir("data_env") / e.path().filename()));
}

TEST_F(Cli, FileSeedBeatsEnvironment) {
  ::setenv("MODALSEG_SEED", "99", 1);
  const auto r = run({"gen-data", "--config", cfg(), "--out", dir("data_file_seed").string()});
  ::unsetenv("MODALSEG_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.find("seed 99"), std::string::npos);
}

TEST_F(Cli, ExplicitSeedBeatsEnvironment) {
  ::setenv("MODALSEG_SEED", "99", 1);
  const auto r = run({"gen-data", "--config", cfg(), "--seed", "7", "--out", dir("data_flag").string()});
  ::unsetenv("MODALSEG_SEED");
  EXPECT_NE(r.out.find("seed 7"), std::string::npos);
}

TEST_F(Cli, TrainZeroStepsWritesCheckpointOnly) {
  const auto out = dir("train_zero");
  const auto r = run({"train", "--config", cfg(), "--data", data(), "--out", out.string(), "--steps", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "final.mmck"));
  EXPECT_TRUE(read_lines(out / "metrics.jsonl").empty());
  EXPECT_FALSE(fs::exists(checkpoint_path(out, 500)));
}

TEST_F(Cli, TrainTwiceGivesIdenticalLogs) {
  for (const char* name : {"train_a", "train_b"})
    ASSERT_EQ(run({"train", "--config", cfg(), "--data", data(), "--out", dir(name).string(), "--steps", "3",
                   "--seed", "1"})
                  .code,
              0);
  const auto a = read_lines(dir("train_a") / "metrics.jsonl");
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a, read_lines(dir("train_b") / "metrics.jsonl"));
  EXPECT_EQ(read_file_bytes(dir("train_a") / "final.mmck"), read_file_bytes(dir("train_b") / "final.mmck"));
}

TEST_F(Cli, TrainResumeMatchesUninterrupted) {
  const auto out = dir("train_resume");
  ASSERT_EQ(run({"train", "--config", cfg(), "--data", data(), "--out", out.string(), "--steps", "1", "--seed", "1"})
                .code,
            0);
  fs::rename(out / "final.mmck", out / "step1.mmck");
  const auto r = run({"train", "--config", cfg(), "--data", data(), "--out", out.string(), "--steps", "3", "--seed",
                      "1", "--resume", (out / "step1.mmck").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file_bytes(out / "final.mmck"), read_file_bytes(model()));
  EXPECT_EQ(read_lines(out / "metrics.jsonl"), read_lines(dir("model") / "metrics.jsonl"));
}

// With beta = 0 the discriminator's initialization must not reach the model.
TEST_F(Cli, BetaZeroIgnoresDiscriminator) {
  for (std::uint64_t s : {3u, 40u}) {
    const auto name = "disc" + std::to_string(s);
    write_text_file(dir(name + ".json"), small_config(s).dump());
    ASSERT_EQ(run({"train", "--config", dir(name + ".json").string(), "--data", data(), "--out", dir(name).string(),
                   "--steps", "3", "--beta", "0"})
                  .code,
              0);
  }
  const auto a = load_model<float>(dir("disc3") / "final.mmck"), b = load_model<float>(dir("disc40") / "final.mmck");
  EXPECT_EQ(a.values, b.values);
  const auto la = read_lines(dir("disc3") / "metrics.jsonl"), lb = read_lines(dir("disc40") / "metrics.jsonl");
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    const auto ma = metrics_from_json(json::parse(la[i])), mb = metrics_from_json(json::parse(lb[i]));
    EXPECT_EQ(ma.loss_full, mb.loss_full);
    EXPECT_NE(ma.g_loss, mb.g_loss);
  }
}

TEST_F(Cli, BadConfigKeyIsUsageErrorWithNoOutput) {
  json bad = small_config();
  bad["train"]["warmup"] = 10;
  write_text_file(dir("bad.json"), bad.dump());
  const auto out = dir("bad_out");
  const auto r = run({"train", "--config", dir("bad.json").string(), "--data", data(), "--out", out.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("warmup"), std::string::npos);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, MissingDatasetIsIoError) {
  const auto out = dir("no_data_out");
  const auto r = run({"train", "--config", cfg(), "--data", dir("nowhere").string(), "--out", out.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, EvalCsvHasSixLines) {
  const auto r = run({"eval", "--checkpoint", model(), "--data", data(), "--format", "csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 6u);
  const auto names = report_row_names();
  for (std::size_t i = 0; i < names.size(); ++i) EXPECT_EQ(lines[i + 1].substr(0, names[i].size() + 1), names[i] + ",");
}

TEST_F(Cli, EvalMaskFilterAndJsonFile) {
  const auto file = dir("report.json");
  const auto r = run({"eval", "--checkpoint", model(), "--data", data(), "--format", "json", "--mask", "missing-FLAIR",
                      "--out", file.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  const auto report = report_from_json(json::parse(read_text_file(file)));
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].name, "missing-FLAIR");
  EXPECT_EQ(report.rows[0].cells[0].slices, 2u);
}

TEST_F(Cli, EvalRejectsUnknownMaskAndFormat) {
  EXPECT_EQ(run({"eval", "--checkpoint", model(), "--data", data(), "--mask", "missing-PD"}).code, 2);
  EXPECT_EQ(run({"eval", "--checkpoint", model(), "--data", data(), "--format", "xml"}).code, 2);
  EXPECT_EQ(run({"eval", "--checkpoint", dir("none.mmck").string(), "--data", data()}).code, 3);
}

TEST_F(Cli, RelevanceDefaultWritesSixteenPairs) {
  const auto out = dir("rel_all");
  const auto r = run({"relevance", "--checkpoint", model(), "--data", data(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(out), 32u);
  const std::string first = load_dataset(data()).test.front();
  EXPECT_TRUE(fs::exists(out / (first + "_FLAIR_ED.ppm")));
  EXPECT_TRUE(fs::exists(out / (first + "_T1_BG.wemp")));
}

TEST_F(Cli, RelevanceSinglePair) {
  const auto out = dir("rel_one");
  const std::string id = load_dataset(data()).train.front();
  const auto r = run({"relevance", "--checkpoint", model(), "--data", data(), "--out", out.string(), "--sample", id,
                      "--channel", "FLAIR", "--class", "ED"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(out), 2u);
  const auto m = decode_evidence_raw(read_file_bytes(out / (id + "_FLAIR_ED.wemp")));
  EXPECT_EQ(m.height, 32);
  EXPECT_EQ(m.values.size(), 32u * 32u);
}

TEST_F(Cli, RelevanceUnknownChannelListsValidNames) {
  const auto r = run({"relevance", "--checkpoint", model(), "--data", data(), "--out", dir("rel_bad").string(),
                      "--channel", "DWI"});
  EXPECT_EQ(r.code, 2);
  for (const char* name : {"T1", "T1c", "T2", "FLAIR"}) EXPECT_NE(r.err.find(name), std::string::npos) << name;
  EXPECT_FALSE(fs::exists(dir("rel_bad")));
}

TEST(CliHelp, DocumentsEveryFlagAndDefault) {
  const auto r = run({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--config", "--seed", "--data", "--out", "--steps", "--batch", "--lr", "--d-lr", "--alpha",
                           "--beta", "--checkpoint-interval", "--resume"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  for (const char* def : {"2000", "0.001", "0.0002", "0.1", "500"}) EXPECT_NE(r.out.find(def), std::string::npos) << def;
  const auto top = run({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"gen-data", "train", "eval", "relevance"}) EXPECT_NE(top.out.find(sub), std::string::npos);
}

TEST(CliHelp, NoSubcommandIsUsageError) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"fit"}).code, 2);
  EXPECT_EQ(run({"train", "--steps", "many"}).code, 2);
}

TEST(CliBinary, ExitCodesFromRealProcess) {
  const std::string bin = MODALSEG_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin + " --help"), 0);
  EXPECT_EQ(status(bin + " gen-data"), 2);
  EXPECT_EQ(status(bin + " eval --checkpoint /nonexistent/x.mmck --data /nonexistent"), 3);
}

}  // namespace

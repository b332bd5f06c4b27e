#include "crosswatch/io.hpp"
#include "crosswatch/metrics.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace crosswatch;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / ("crosswatch_cli_test_" + std::to_string(::getpid()));

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(const std::string& args) {
  const std::string exe = CROSSWATCH_CLI;
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = exe + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_file(out), io::read_file(err)};
}

std::string write_text(const std::string& name, const std::string& text) {
  io::write_file(kRoot / name, text);
  return (kRoot / name).string();
}

const char* kSmallGenerator =
    R"({"splits":{"train":{"crossers":3,"bystanders":3},"val":{"crossers":2,"bystanders":2},)"
    R"("test":{"crossers":2,"bystanders":2}},"feature_dim":16})";
const char* kSmallTrain = R"({"hidden":16,"epochs":2,"sequence_length":10,"horizon":2})";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto gen = write_text("gen.json", kSmallGenerator);
    ASSERT_EQ(cli("generate --config " + gen + " --seed 3 --out " + data()).code, 0);
    write_text("train.json", kSmallTrain);
    ASSERT_EQ(cli("train --config " + train_config() + " --data " + data() + " --out " + run() + " --ablation full --seed 1").code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }

  static std::string data() { return (kRoot / "data").string(); }
  static std::string run() { return (kRoot / "run").string(); }
  static std::string ckpt() { return (kRoot / "run" / "best.ckpt").string(); }
  static std::string train_config() { return (kRoot / "train.json").string(); }
};

}  // namespace

TEST_F(Cli, GenerateIsDeterministic) {
  const auto gen = (kRoot / "gen.json").string();
  ASSERT_EQ(cli("generate --config " + gen + " --seed 3 --out " + (kRoot / "again").string()).code, 0);
  for (auto name : {"annotations.jsonl", "features.bin", "manifest.json"})
    EXPECT_EQ(io::read_file(kRoot / "again" / name), io::read_file(kRoot / "data" / name)) << name;
  const auto manifest = nlohmann::json::parse(io::read_file(kRoot / "data" / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["generator"]["feature_dim"], 16);
}

TEST_F(Cli, GenerateValidatesBeforeWriting) {
  const auto bad = write_text("bad.json", R"({"noise_sigma":-1.0})");
  const auto r = cli("generate --config " + bad + " --out " + (kRoot / "never").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("noise_sigma"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(kRoot / "never"));
  EXPECT_EQ(cli("generate --out " + data()).code, 2);
  EXPECT_EQ(cli("generate --unknown-flag --out x").code, 2);
}

TEST_F(Cli, TrainWritesCheckpointLogAndManifest) {
  for (auto name : {"best.ckpt", "log.jsonl", "manifest.json"}) EXPECT_TRUE(fs::exists(kRoot / "run" / name)) << name;
  EXPECT_FALSE(fs::exists(kRoot / "run" / "train.lock"));
  // second run into the same directory needs --force
  EXPECT_EQ(cli("train --config " + train_config() + " --data " + data() + " --out " + run()).code, 2);
}

TEST_F(Cli, IntentOnlyCheckpointHasNoActionHead) {
  const auto out = (kRoot / "run_i").string();
  ASSERT_EQ(cli("train --config " + train_config() + " --data " + data() + " --out " + out + " --ablation i").code, 0);
  const auto manifest = nlohmann::json::parse(io::read_file(fs::path(out) / "manifest.json"));
  ASSERT_FALSE(manifest["parameters"].empty());
  for (const auto& p : manifest["parameters"]) {
    const auto name = p["name"].get<std::string>();
    EXPECT_FALSE(name.starts_with("head.action") || name.starts_with("head.future") || name.starts_with("dec.")) << name;
  }
}

TEST_F(Cli, SameSeedReproducesLogAndCheckpoint) {
  const auto out = (kRoot / "run_again").string();
  ASSERT_EQ(cli("train --config " + train_config() + " --data " + data() + " --out " + out + " --ablation full --seed 1").code, 0);
  EXPECT_EQ(io::read_file(fs::path(out) / "log.jsonl"), io::read_file(kRoot / "run" / "log.jsonl"));
  EXPECT_EQ(io::read_file(fs::path(out) / "best.ckpt"), io::read_file(kRoot / "run" / "best.ckpt"));
}

TEST_F(Cli, TrainRejectsMissingFeatures) {
  fs::create_directories(kRoot / "broken");
  fs::copy_file(kRoot / "data" / "annotations.jsonl", kRoot / "broken" / "annotations.jsonl", fs::copy_options::overwrite_existing);
  const auto r = cli("train --config " + train_config() + " --data " + (kRoot / "broken").string() + " --out " +
                     (kRoot / "run_broken").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(kRoot / "run_broken"));
}

TEST_F(Cli, EvalBothSettings) {
  for (auto setting : {"original", "event"}) {
    const auto r = cli("eval --checkpoint " + ckpt() + " --data " + data() + " --setting " + setting);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["setting"], setting);
    for (auto key : {"accuracy", "f1", "precision", "auc", "delta_s", "action_map"})
      EXPECT_TRUE(j.contains(key) && !j[key].is_null()) << setting << " " << key;
  }
  const auto file = (kRoot / "report.csv").string();
  ASSERT_EQ(cli("eval --checkpoint " + ckpt() + " --data " + data() + " --format csv --out " + file).code, 0);
  EXPECT_EQ(io::read_file(file).substr(0, 7), "setting");
}

TEST_F(Cli, EvalEventSettingWithoutCrossersFails) {
  const auto gen = write_text("nocross.json", R"({"splits":{"train":{"crossers":0,"bystanders":2},"val":{"crossers":0,"bystanders":1},)"
                                              R"("test":{"crossers":0,"bystanders":2}},"feature_dim":16})");
  const auto dir = (kRoot / "nocross").string();
  ASSERT_EQ(cli("generate --config " + gen + " --out " + dir).code, 0);
  const auto r = cli("eval --checkpoint " + ckpt() + " --data " + dir + " --setting event");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no crossing events"), std::string::npos) << r.err;
}

TEST_F(Cli, PredictDumpMatchesEvalReport) {
  const auto ds = io::load_annotations(kRoot / "data" / "annotations.jsonl");
  std::vector<metrics::EvalRecord> records;
  for (const auto* track : ds.split(data::Split::test)) {
    const auto r = cli("predict --checkpoint " + ckpt() + " --data " + data() + " --track " + track->track_id);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("±"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find(" ms"), std::string::npos) << r.err;
    std::istringstream lines(r.out);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      const auto& f = track->frames[rows];
      EXPECT_EQ(j["t"], rows);
      double sum = 0;
      for (double p : j["action"]) sum += p;
      EXPECT_NEAR(sum, 1.0, 1e-9);
      for (const auto& [type, weights] : j["attention"].items()) {
        double w = 0;
        for (const auto& e : weights) w += e["weight"].get<double>();
        EXPECT_NEAR(w, 1.0, 1e-9) << type;
      }
      records.push_back({j["intent"].get<double>(), f.intent, j["action"].get<std::vector<double>>(),
                         static_cast<int>(f.semantic_action)});
      ++rows;
    }
    EXPECT_EQ(rows, track->frames.size());
  }
  const auto r = cli("eval --checkpoint " + ckpt() + " --data " + data());
  const auto report = nlohmann::json::parse(r.out);
  EXPECT_NEAR(report["auc"].get<double>(), *metrics::auc(records), 1e-12);
  EXPECT_NEAR(report["action_map"].get<double>(), metrics::action_map(records).map, 1e-12);
}

TEST_F(Cli, PredictUnknownTrack) {
  const auto r = cli("predict --checkpoint " + ckpt() + " --data " + data() + " --track nobody");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nobody"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesAndIsStable) {
  const auto a = cli("gradcheck --size toy");
  EXPECT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("PASS"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --size toy").out, a.out);
  EXPECT_EQ(cli("gradcheck --size huge").code, 2);
}

TEST_F(Cli, GradcheckDetectsCorruptedRule) {
  const auto r = cli("gradcheck --inject-fault matmul");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

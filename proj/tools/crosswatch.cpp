// crosswatch: generate | train | eval | predict | gradcheck
//
// Exit codes: 0 success, 2 invalid input, 3 numerical failure.

#include "crosswatch/crosswatch.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>

using namespace crosswatch;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 2;
constexpr int kNumeric = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

bool non_empty_dir(const fs::path& dir) { return fs::exists(dir) && !fs::is_empty(dir); }

void require_fresh_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (non_empty_dir(dir) && !force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
}

struct DataDir {
  data::Dataset dataset;
  data::FeatureStore features;
};

DataDir load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory " + dir.string() + " does not exist");
  DataDir d{io::load_annotations(dir / "annotations.jsonl"), io::load_features(dir / "features.bin")};
  io::check_feature_coverage(d.dataset, d.features);
  return d;
}

void write_json(const fs::path& path, const ordered_json& j) { io::write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::uint64_t seed = 0;
  bool force = false;
};

int run_generate(const GenerateArgs& a) {
  const auto cfg = a.config.empty() ? synthetic::GeneratorConfig{} : synthetic::generator_config_from_json(read_json(a.config));
  cfg.validate();
  require_fresh_dir(a.out, a.force);
  const auto data = synthetic::generate(cfg, a.seed);
  fs::create_directories(a.out);
  io::write_annotations(fs::path(a.out) / "annotations.jsonl", data.dataset);
  io::write_features(fs::path(a.out) / "features.bin", data.features);
  write_json(fs::path(a.out) / "manifest.json",
             {{"generator", synthetic::to_json(cfg)},
              {"seed", a.seed},
              {"tracks", data.dataset.tracks.size()},
              {"files", {"annotations.jsonl", "features.bin"}}});
  std::cerr << "wrote " << data.dataset.tracks.size() << " tracks to " << a.out << '\n';
  return kOk;
}

struct TrainArgs {
  std::string config, data, out, ablation;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool force = false;
};

int run_train(const TrainArgs& a) {
  nlohmann::json j = a.config.empty() ? nlohmann::json::object() : read_json(a.config);
  if (!a.ablation.empty()) j["ablation"] = a.ablation;
  if (a.seed) j["seed"] = *a.seed;
  if (a.epochs) j["epochs"] = *a.epochs;
  const auto cfg = training::train_config_from_json(j);
  const auto d = load_data(a.data);
  if (d.dataset.split(data::Split::train).empty() || d.dataset.split(data::Split::val).empty())
    throw UsageError("training needs non-empty train and val splits");
  const fs::path out(a.out);
  require_fresh_dir(out, a.force);
  if (fs::exists(out / "train.lock")) throw UsageError("another run holds " + (out / "train.lock").string());

  fs::create_directories(out);
  std::ofstream log(out / "log.jsonl");
  if (!log) throw UsageError("cannot write " + (out / "log.jsonl").string());
  const auto result = training::train(cfg, d.dataset, d.features, {&log, out});

  ordered_json params = ordered_json::array();
  for (const auto& p : result.best->params()) params.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  write_json(out / "manifest.json", {{"config", training::to_json(cfg)},
                                     {"data", fs::absolute(a.data).string()},
                                     {"best_epoch", result.best_epoch},
                                     {"selection_score", result.best_score},
                                     {"checkpoint", "best.ckpt"},
                                     {"parameters", params}});
  std::cerr << "best epoch " << result.best_epoch << " (val " << (cfg.ablation.intent ? "AUC " : "mAP ")
            << result.best_score << "), checkpoint " << (out / "best.ckpt").string() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, setting = "original", split = "test", out, format = "json";
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  metrics::EvalOptions opt;
  opt.setting = metrics::parse_setting(a.setting);
  const auto split = data::parse_enum<data::Split>(a.split);
  if (!split) throw UsageError("unknown split '" + a.split + "'");
  opt.split = *split;
  opt.seed = a.seed;
  if (a.format != "json" && a.format != "csv") throw UsageError("unknown format '" + a.format + "'");
  const auto loaded = checkpoint::load(a.checkpoint);
  const auto d = load_data(a.data);
  const auto report = metrics::evaluate(*loaded.model, d.dataset, d.features, opt).report;
  const std::string text = a.format == "json" ? report.to_json().dump(2) + "\n"
                                              : metrics::MetricsReport::csv_header() + "\n" + report.csv_row() + "\n";
  if (a.out.empty()) std::cout << text;
  else io::write_file(a.out, text);
  return kOk;
}

struct PredictArgs {
  std::string checkpoint, data, track, out;
};

ordered_json dump_row(std::size_t t, const data::FrameAnnotation& f, const model::StepOutput& o) {
  ordered_json row{{"t", t}, {"frame_index", f.frame_index}};
  row["intent"] = o.intent_score ? ordered_json(*o.intent_score) : ordered_json(nullptr);
  row["action"] = o.action_dist;
  row["future"] = o.future_dists;
  ordered_json att = ordered_json::object();
  for (const auto& ta : o.attention) {
    ordered_json w = ordered_json::array();
    for (auto [idx, weight] : ta.weights) w.push_back({{"object", idx}, {"weight", weight}});
    att[std::string(data::to_string(ta.type))] = w;
  }
  row["attention"] = att;
  return row;
}

int run_predict(const PredictArgs& a) {
  const auto loaded = checkpoint::load(a.checkpoint);
  const auto d = load_data(a.data);
  const data::Track* track = d.dataset.find(a.track);
  if (!track) throw UsageError("unknown track '" + a.track + "'");
  const auto& m = *loaded.model;
  if (d.features.dim() != m.config().visual_dim)
    throw UsageError("feature dimensionality " + std::to_string(d.features.dim()) + " does not match the checkpoint (" +
                     std::to_string(m.config().visual_dim) + ")");

  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw UsageError("cannot write " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;
  auto state = m.online_state();
  std::vector<double> ms;
  for (std::size_t t = 0; t < track->frames.size(); ++t) {
    const auto& f = track->frames[t];
    const auto visual = d.features.lookup(track->track_id, f.frame_index);
    const auto t0 = std::chrono::steady_clock::now();
    const auto o = m.step(f, visual, state);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    out << dump_row(t, f, o).dump() << '\n';
  }
  double mean = 0, var = 0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  for (double v : ms) var += (v - mean) * (v - mean);
  const double sd = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  std::cerr << std::fixed << std::setprecision(3) << "per-frame latency: " << mean << " ± " << sd << " ms over "
            << ms.size() << " frames\n";
  return kOk;
}

struct GradcheckArgs {
  std::string size = "toy";
  std::string fault;
  double tolerance = 1e-3;
};

int run_gradcheck(const GradcheckArgs& a) {
  if (a.size != "toy") throw UsageError("unknown size '" + a.size + "' (expected toy)");
  std::optional<ad::ScopedGradientFault> fault;
  if (!a.fault.empty()) fault.emplace(a.fault);
  const auto report = diagnostics::toy_gradient_check();
  bool ok = true;
  std::cout << std::left << std::setw(28) << "group" << std::setw(14) << "max_rel_err" << "status\n";
  for (const auto& r : report) {
    const bool pass = r.max_relative_error < a.tolerance;
    ok = ok && pass;
    std::cout << std::left << std::setw(28) << r.name << std::setw(14) << std::scientific << std::setprecision(3)
              << r.max_relative_error << (pass ? "ok" : "FAIL") << '\n';
  }
  std::cout << (ok ? "PASS" : "FAIL") << ": " << report.size() << " groups, tolerance " << a.tolerance << '\n';
  if (!ok) throw NumericFailure("gradient check failed");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pedestrian intent and action prediction"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic dataset");
  g->add_option("--config", gen.config, "generator config (JSON)")->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_flag("--force", gen.force, "overwrite a non-empty directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr.config, "training config (JSON)")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--ablation", tr.ablation, "i, a, ia, af, iaf or full");
  t->add_option("--seed", tr.seed, "training seed");
  t->add_option("--epochs", tr.epochs, "epoch count");
  t->add_flag("--force", tr.force, "reuse a non-empty run directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--setting", ev.setting, "original or event");
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--seed", ev.seed, "event window seed");
  e->add_option("--format", ev.format, "json or csv");
  e->add_option("--out", ev.out, "write the report here instead of stdout");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "per-frame outputs for one track");
  p->add_option("--checkpoint", pr.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  p->add_option("--data", pr.data, "dataset directory")->required();
  p->add_option("--track", pr.track, "track id")->required();
  p->add_option("--out", pr.out, "write the dump here instead of stdout");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "finite-difference check of the full network");
  c->add_option("--size", gc.size, "problem size (toy)");
  c->add_option("--tolerance", gc.tolerance, "max relative error");
  c->add_option("--inject-fault", gc.fault, "corrupt one gradient rule")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kInvalid;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*p) return run_predict(pr);
    if (*c) return run_gradcheck(gc);
  } catch (const training::DivergenceError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kNumeric;
  } catch (const ad::NumericError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kNumeric;
  } catch (const NumericFailure& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kInvalid;
  }
  return kInvalid;
}

#pragma once

// Multi-task objective, intent-weight ramp, Adam, and the training loop.
//
//   L = (1/T) sum_t [ w1 * BCE(intent_t) + w2 * CE(action_t) + w3 * mean_k CE(future_{t,k}) ]
//
// averaged over the batch. Future targets are the ground-truth actions at
// frames t+1..t+delta; steps past the end of the sample are left out of the
// mean. Probabilities are clamped to [1e-12, 1 - 1e-12] in log space.

#include "crosswatch/autodiff.hpp"
#include "crosswatch/behavior_model.hpp"
#include "crosswatch/checkpoint.hpp"
#include "crosswatch/data_model.hpp"
#include "crosswatch/metrics.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace crosswatch::training {

inline const double kLogFloor = std::log(1e-12);
inline const double kLogCeil = std::log1p(-1e-12);

struct LossWeights {
  double omega1 = 1.0;
  double omega2 = 1.0;
  double omega3 = 1.0;
};

/// Per-frame targets of one sample.
struct SequenceLabels {
  std::vector<int> intent;
  std::vector<int> action;
};

inline SequenceLabels labels_of(const data::SequenceSample& s) {
  SequenceLabels l;
  for (const auto& f : s.frames) {
    l.intent.push_back(f.intent);
    l.action.push_back(static_cast<int>(f.semantic_action));
  }
  return l;
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t batch, const std::string& what)
      : std::runtime_error("divergence at batch " + std::to_string(batch) + ": " + what), batch_(batch) {}
  std::size_t batch() const { return batch_; }

 private:
  std::size_t batch_;
};

namespace detail {

inline ad::Tensor one_hot(std::span<const SequenceLabels> labels, std::size_t t) {
  ad::Tensor out({labels.size(), data::kActionCount});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const int a = labels[b].action[t];
    if (a < 0 || a >= static_cast<int>(data::kActionCount)) throw std::invalid_argument("action label out of range");
    out.at(b, static_cast<std::size_t>(a)) = 1.0;
  }
  return out;
}

inline ad::Var cross_entropy_sum(const ad::Var& logits, const ad::Tensor& target) {
  return ad::sum(ad::mul_const(ad::clamp(ad::log_softmax_rows(logits), kLogFloor, kLogCeil), target));
}

}  // namespace detail

/// Batch-mean objective. Heads missing from `steps` contribute nothing; a
/// zero weight drops its term entirely.
inline ad::Var multitask_loss(ad::Tape& tape, const std::vector<model::StepVars>& steps,
                              std::span<const SequenceLabels> labels, const LossWeights& w) {
  if (steps.empty()) throw std::invalid_argument("multitask_loss: no steps");
  if (labels.empty()) throw std::invalid_argument("multitask_loss: no labels");
  const std::size_t T = steps.size();
  const std::size_t B = labels.size();
  for (const auto& l : labels)
    if (l.intent.size() != T || l.action.size() != T)
      throw std::invalid_argument("multitask_loss: label length " + std::to_string(l.action.size()) +
                                  " does not match " + std::to_string(T) + " output steps");
  const double norm = 1.0 / (static_cast<double>(T) * static_cast<double>(B));

  std::vector<ad::Var> terms;
  for (std::size_t t = 0; t < T; ++t) {
    const auto& s = steps[t];
    if (s.intent_logit.valid() && w.omega1 != 0.0) {
      if (s.intent_logit.rows() != B) throw std::invalid_argument("multitask_loss: batch size mismatch");
      ad::Tensor y({B, 1}), not_y({B, 1});
      for (std::size_t b = 0; b < B; ++b) {
        y[b] = labels[b].intent[t] ? 1.0 : 0.0;
        not_y[b] = 1.0 - y[b];
      }
      const auto lp = ad::clamp(ad::log_sigmoid(s.intent_logit), kLogFloor, kLogCeil);
      const auto ln = ad::clamp(ad::log_sigmoid(ad::scale(s.intent_logit, -1.0)), kLogFloor, kLogCeil);
      terms.push_back(ad::scale(ad::add(ad::sum(ad::mul_const(lp, y)), ad::sum(ad::mul_const(ln, not_y))),
                                -w.omega1 * norm));
    }
    if (s.action_logits.valid() && w.omega2 != 0.0) {
      if (s.action_logits.rows() != B) throw std::invalid_argument("multitask_loss: batch size mismatch");
      terms.push_back(ad::scale(detail::cross_entropy_sum(s.action_logits, detail::one_hot(labels, t)), -w.omega2 * norm));
    }
    if (!s.future_logits.empty() && w.omega3 != 0.0) {
      const std::size_t valid = std::min(s.future_logits.size(), T - 1 - t);
      for (std::size_t k = 1; k <= valid; ++k)
        terms.push_back(ad::scale(detail::cross_entropy_sum(s.future_logits[k - 1], detail::one_hot(labels, t + k)),
                                  -w.omega3 * norm / static_cast<double>(valid)));
    }
  }
  if (terms.empty()) return tape.constant(ad::Tensor::scalar(0.0));
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

/// Intent-loss ramp sigma(k * (iteration - m)).
inline double omega1_schedule(double iteration, double midpoint, double steepness) {
  if (!(steepness > 0.0)) throw std::invalid_argument("omega1_schedule: steepness must be positive");
  return ad::detail::sigmoid(steepness * (iteration - midpoint));
}

/// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(const ad::ParameterStore& params, Options opt) : opt_(opt) {
    if (!(opt.learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }
  const Options& options() const { return opt_; }

  /// Applies one update from the accumulated gradients. Throws before
  /// touching any parameter when a gradient is not finite.
  void step(ad::ParameterStore& params) {
    if (params.size() != m_.size()) throw std::invalid_argument("adam: parameter count changed");
    for (const auto& p : params)
      if (!p.grad.all_finite()) throw ad::NumericError("adam: non-finite gradient in '" + p.name + "'");
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& p : params) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      if (m.size() != p.value.size()) throw std::invalid_argument("adam: shape of '" + p.name + "' changed");
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double g = p.grad[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        p.value[i] -= opt_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.epsilon);
      }
    }
  }

 private:
  Options opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
  std::size_t sequence_length = 30;  // T
  std::size_t horizon = 5;           // delta
  double learning_rate = 1e-5;
  std::size_t batch_size = 128;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  model::Ablation ablation;
  std::optional<double> schedule_midpoint;   // default: half the planned iterations
  std::optional<double> schedule_steepness;  // default: 10 / midpoint
  double omega2 = 1.0;
  double omega3 = 1.0;
  std::size_t stride = 15;
  std::size_t hidden = 128;
  bool normalize_coordinates = false;
  double image_width = 1920.0;
  double image_height = 1080.0;

  /// Reduced batch and larger step for the synthetic desk benchmark.
  static TrainConfig desk() {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.batch_size = 8;
    c.epochs = 10;
    c.normalize_coordinates = true;
    return c;
  }

  void validate() const {
    if (!(sequence_length > horizon && horizon >= 1))
      throw std::invalid_argument("train config: require sequence_length > horizon >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("train config: learning_rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (stride < 1) throw std::invalid_argument("train config: stride must be >= 1");
    if (hidden < 1) throw std::invalid_argument("train config: hidden must be >= 1");
    if (schedule_steepness && !(*schedule_steepness > 0.0))
      throw std::invalid_argument("train config: schedule_steepness must be positive");
    if (schedule_midpoint && !std::isfinite(*schedule_midpoint))
      throw std::invalid_argument("train config: schedule_midpoint must be finite");
    if (!(image_width > 0.0 && image_height > 0.0)) throw std::invalid_argument("train config: image size must be positive");
    if (!ablation.intent && !ablation.action)
      throw std::invalid_argument("train config: at least one of the intent or action heads is required");
  }

  model::ModelConfig model_config(std::size_t visual_dim) const {
    model::ModelConfig m;
    m.visual_dim = visual_dim;
    m.hidden = hidden;
    m.horizon = horizon;
    m.ablation = ablation;
    m.seed = seed;
    m.relation.normalize_coordinates = normalize_coordinates;
    m.relation.image_width = image_width;
    m.relation.image_height = image_height;
    return m;
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  return {{"sequence_length", c.sequence_length},
          {"horizon", c.horizon},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"ablation", c.ablation.name()},
          {"schedule_midpoint", opt(c.schedule_midpoint)},
          {"schedule_steepness", opt(c.schedule_steepness)},
          {"omega2", c.omega2},
          {"omega3", c.omega3},
          {"stride", c.stride},
          {"hidden", c.hidden},
          {"normalize_coordinates", c.normalize_coordinates},
          {"image_width", c.image_width},
          {"image_height", c.image_height}};
}

/// Reads a config object over `base`. Every key is optional; unknown keys
/// are rejected. The "profile" key selects the base ("desk" or "reference").
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = TrainConfig::desk()) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  static const std::set<std::string> known{"profile", "sequence_length", "horizon", "learning_rate", "batch_size",
                                           "epochs", "seed", "ablation", "schedule_midpoint", "schedule_steepness",
                                           "omega2", "omega3", "stride", "hidden", "normalize_coordinates",
                                           "image_width", "image_height"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  TrainConfig c = base;
  if (j.contains("profile")) {
    const auto p = j["profile"].get<std::string>();
    if (p == "desk") c = TrainConfig::desk();
    else if (p == "reference") c = TrainConfig{};
    else throw std::invalid_argument("train config: unknown profile '" + p + "' (expected desk or reference)");
  }
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    auto read_opt = [&](const char* key, std::optional<double>& field) {
      if (!j.contains(key)) return;
      if (j[key].is_null()) field.reset();
      else field = j[key].get<double>();
    };
    read("sequence_length", c.sequence_length);
    read("horizon", c.horizon);
    read("learning_rate", c.learning_rate);
    read("batch_size", c.batch_size);
    read("epochs", c.epochs);
    read("seed", c.seed);
    if (j.contains("ablation")) c.ablation = model::Ablation::parse(j["ablation"].get<std::string>());
    read_opt("schedule_midpoint", c.schedule_midpoint);
    read_opt("schedule_steepness", c.schedule_steepness);
    read("omega2", c.omega2);
    read("omega3", c.omega3);
    read("stride", c.stride);
    read("hidden", c.hidden);
    read("normalize_coordinates", c.normalize_coordinates);
    read("image_width", c.image_width);
    read("image_height", c.image_height);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// training loop

/// Exclusive marker file in the output directory; removed on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(std::filesystem::path dir) : path_(std::move(dir) / "train.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error("another training run holds " + path_.string() + " (remove it if that run is gone)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t iteration = 0;  // iterations completed
  double omega1 = 0.0;        // at the epoch's last batch
  double train_loss = 0.0;    // mean batch loss
  metrics::MetricsReport val;
};

struct TrainResult {
  std::unique_ptr<model::BehaviorModel> best;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  std::vector<EpochLog> epochs;
  std::vector<double> batch_losses;
};

struct TrainOutputs {
  std::ostream* log = nullptr;                  // JSON lines
  std::optional<std::filesystem::path> out_dir;  // checkpoint + lock
};

/// Model-selection score: val AUC, or val mAP when the model has no intent head.
inline double selection_score(const metrics::MetricsReport& r) {
  if (r.auc) return *r.auc;
  if (r.action) return r.action->map;
  return 0.0;
}

inline nlohmann::ordered_json log_line(const EpochLog& e) {
  auto val = e.val.to_json();
  nlohmann::ordered_json v{{"auc", val["auc"]}, {"delta_s", val["delta_s"]}, {"accuracy", val["accuracy"]},
                           {"action_map", val["action_map"]}};
  return {{"epoch", e.epoch}, {"iteration", e.iteration}, {"omega1", e.omega1}, {"train_loss", e.train_loss}, {"val", v}};
}

inline TrainResult train(const TrainConfig& cfg, const data::Dataset& ds, const data::VisualFeatureProvider& features,
                         const TrainOutputs& outputs = {}) {
  cfg.validate();
  const auto train_tracks = ds.split(data::Split::train);
  const auto val_tracks = ds.split(data::Split::val);
  if (train_tracks.empty()) throw std::invalid_argument("train: dataset has no train split");
  if (val_tracks.empty()) throw std::invalid_argument("train: dataset has no val split");

  std::optional<DirectoryLock> lock;
  if (outputs.out_dir) {
    std::filesystem::create_directories(*outputs.out_dir);
    lock.emplace(*outputs.out_dir);
  }

  model::BehaviorModel net(cfg.model_config(features.dim()));
  const auto windows = data::sample_original(train_tracks, cfg.sequence_length, cfg.stride).samples;
  if (windows.empty())
    throw std::invalid_argument("train: no train track has " + std::to_string(cfg.sequence_length) + " frames");
  std::vector<SequenceLabels> window_labels;
  for (const auto& w : windows) window_labels.push_back(labels_of(w));

  std::optional<data::BalancedSampler> sampler;
  try {
    sampler.emplace(windows, data::mix_seed(cfg.seed, 0x5a3e));
  } catch (const std::invalid_argument&) {
    // single intent class: uniform draws
  }
  std::mt19937_64 uniform_rng(data::mix_seed(cfg.seed, 0x5a3f));
  std::uniform_int_distribution<std::size_t> uniform(0, windows.size() - 1);

  const std::size_t per_epoch = (windows.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total = static_cast<double>(per_epoch * cfg.epochs);
  const double midpoint = cfg.schedule_midpoint.value_or(total / 2.0);
  const double steepness = cfg.schedule_steepness.value_or(10.0 / std::max(midpoint, 1.0));

  Adam adam(net.params(), {cfg.learning_rate});
  metrics::EvalOptions val_opt;
  val_opt.split = data::Split::val;

  if (outputs.log) {
    nlohmann::ordered_json header{{"event", "config"},
                                  {"config", to_json(cfg)},
                                  {"optimizer", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-8}}},
                                  {"windows", windows.size()},
                                  {"iterations_per_epoch", per_epoch},
                                  {"schedule", {{"midpoint", midpoint}, {"steepness", steepness}}}};
    *outputs.log << header.dump() << '\n' << std::flush;
  }

  TrainResult result;
  result.best = std::make_unique<model::BehaviorModel>(net.config());
  bool have_best = false;
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double omega1 = 0.0;
    for (std::size_t it = 0; it < per_epoch; ++it, ++iteration) {
      std::vector<const data::SequenceSample*> batch;
      std::vector<SequenceLabels> labels;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t k = sampler ? sampler->next() : uniform(uniform_rng);
        batch.push_back(&windows[k]);
        labels.push_back(window_labels[k]);
      }
      omega1 = omega1_schedule(static_cast<double>(iteration), midpoint, steepness);
      ad::Tape tape;
      const auto steps = net.forward(tape, batch, features);
      const auto loss = multitask_loss(tape, steps, labels, {omega1, cfg.omega2, cfg.omega3});
      const double value = loss.value().item();
      if (!std::isfinite(value)) throw DivergenceError(iteration, "loss is not finite");
      net.params().zero_grad();
      tape.backward(loss);
      try {
        adam.step(net.params());
      } catch (const ad::NumericError& e) {
        throw DivergenceError(iteration, e.what());
      }
      loss_sum += value;
      result.batch_losses.push_back(value);
    }

    EpochLog entry{epoch, iteration, omega1, loss_sum / static_cast<double>(per_epoch),
                   metrics::evaluate(net, ds, features, val_opt).report};
    const double score = selection_score(entry.val);
    if (!have_best || score > result.best_score) {
      have_best = true;
      result.best_score = score;
      result.best_epoch = epoch;
      checkpoint::copy_values(net, *result.best);
    }
    if (outputs.log) *outputs.log << log_line(entry).dump() << '\n' << std::flush;
    result.epochs.push_back(std::move(entry));
  }

  if (outputs.out_dir)
    checkpoint::save(*outputs.out_dir / "best.ckpt", *result.best,
                     {{"epoch", result.best_epoch}, {"selection_score", result.best_score}, {"train", to_json(cfg)}});
  return result;
}

}  // namespace crosswatch::training

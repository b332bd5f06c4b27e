#include "crosswatch/gradcheck.hpp"
#include "crosswatch/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace crosswatch;
using training::LossWeights;
using training::SequenceLabels;

namespace {

// Builds StepVars from fixed logits: intent [B,1], action [B,7], future k x [B,7].
struct Fixture {
  ad::Tape tape;
  std::vector<model::StepVars> steps;
};

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double scale = 2.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double log_softmax_at(const std::vector<double>& z, std::size_t c) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return std::clamp(z[c] - m - std::log(s), std::log(1e-12), std::log1p(-1e-12));
}

double bce(double logit, int y) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double lp = std::clamp(std::log(p), std::log(1e-12), std::log1p(-1e-12));
  const double ln = std::clamp(std::log(1.0 - p), std::log(1e-12), std::log1p(-1e-12));
  return -(y ? lp : ln);
}

training::TrainConfig tiny_train_config() {
  auto c = training::TrainConfig::desk();
  c.sequence_length = 10;
  c.horizon = 2;
  c.stride = 10;
  c.hidden = 8;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 4;
  return c;
}

synthetic::SyntheticData tiny_data(std::size_t train_tracks = 2) {
  synthetic::GeneratorConfig g;
  g.train = {train_tracks / 2, train_tracks - train_tracks / 2};
  g.val = {1, 1};
  g.test = {1, 1};
  g.frames_per_track = 60;
  g.feature_dim = 8;
  return synthetic::generate(g, 21);
}

}  // namespace

TEST(MultitaskLoss, UniformActionSingleFrameIsLn7) {
  ad::Tape tape;
  model::StepVars s;
  s.action_logits = tape.constant(ad::Tensor({1, 7}));
  s.intent_logit = tape.constant(ad::Tensor({1, 1}, 3.0));
  const std::vector<model::StepVars> steps{s};
  const std::vector<SequenceLabels> labels{{{1}, {4}}};
  const double loss = training::multitask_loss(tape, steps, labels, {0.0, 1.0, 1.0}).value().item();
  EXPECT_NEAR(loss, std::log(7.0), 1e-9);
}

TEST(MultitaskLoss, PerfectPredictionsAreNearZero) {
  ad::Tape tape;
  std::vector<model::StepVars> steps;
  const std::vector<int> actions{0, 3, 3, 5};
  auto one_hot = [&](int c) {
    ad::Tensor t({1, 7}, -60.0);
    t[static_cast<std::size_t>(c)] = 60.0;
    return tape.constant(t);
  };
  for (std::size_t t = 0; t < actions.size(); ++t) {
    model::StepVars s;
    s.intent_logit = tape.constant(ad::Tensor({1, 1}, 60.0));
    s.action_logits = one_hot(actions[t]);
    for (std::size_t k = 1; k <= 2; ++k) s.future_logits.push_back(one_hot(actions[std::min(t + k, actions.size() - 1)]));
    steps.push_back(s);
  }
  const std::vector<SequenceLabels> labels{{{1, 1, 1, 1}, actions}};
  const double loss = training::multitask_loss(tape, steps, labels, {1.0, 1.0, 1.0}).value().item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LE(loss, 1e-10);
}

TEST(MultitaskLoss, MatchesScalarRecomputation) {
  std::mt19937_64 rng(17);
  const std::size_t T = 3, B = 2, delta = 2;
  ad::Tape tape;
  std::vector<model::StepVars> steps;
  std::vector<std::vector<double>> intent(T), action(T);
  std::vector<std::vector<std::vector<double>>> future(T);
  for (std::size_t t = 0; t < T; ++t) {
    model::StepVars s;
    intent[t] = random_values(B, rng);
    action[t] = random_values(B * 7, rng);
    s.intent_logit = tape.constant(ad::Tensor({B, 1}, intent[t]));
    s.action_logits = tape.constant(ad::Tensor({B, 7}, action[t]));
    for (std::size_t k = 0; k < delta; ++k) {
      future[t].push_back(random_values(B * 7, rng));
      s.future_logits.push_back(tape.constant(ad::Tensor({B, 7}, future[t][k])));
    }
    steps.push_back(s);
  }
  const std::vector<SequenceLabels> labels{{{1, 1, 1}, {1, 2, 3}}, {{0, 0, 0}, {0, 6, 6}}};
  const LossWeights w{0.3, 0.9, 1.7};
  const double got = training::multitask_loss(tape, steps, labels, w).value().item();

  double expected = 0;
  for (std::size_t b = 0; b < B; ++b) {
    double per_sample = 0;
    for (std::size_t t = 0; t < T; ++t) {
      auto row = [&](const std::vector<double>& m) {
        return std::vector<double>(m.begin() + static_cast<long>(b * 7), m.begin() + static_cast<long>(b * 7 + 7));
      };
      double term = w.omega1 * bce(intent[t][b], labels[b].intent[t]);
      term += w.omega2 * -log_softmax_at(row(action[t]), static_cast<std::size_t>(labels[b].action[t]));
      const std::size_t valid = std::min(delta, T - 1 - t);
      double fut = 0;
      for (std::size_t k = 1; k <= valid; ++k)
        fut += -log_softmax_at(row(future[t][k - 1]), static_cast<std::size_t>(labels[b].action[t + k]));
      if (valid > 0) term += w.omega3 * fut / static_cast<double>(valid);
      per_sample += term;
    }
    expected += per_sample / static_cast<double>(T);
  }
  expected /= static_cast<double>(B);
  EXPECT_NEAR(got, expected, 1e-12);
}

TEST(MultitaskLoss, LengthMismatchIsAnError) {
  ad::Tape tape;
  model::StepVars s;
  s.action_logits = tape.constant(ad::Tensor({1, 7}));
  const std::vector<model::StepVars> steps{s, s};
  const std::vector<SequenceLabels> labels{{{0}, {0}}};
  EXPECT_THROW(training::multitask_loss(tape, steps, labels, {}), std::invalid_argument);
}

TEST(MultitaskLoss, ZeroWeightsMakeLossInvariantToHeads) {
  auto p = diagnostics::toy_problem();
  model::BehaviorModel net(p.config);
  std::vector<const data::SequenceSample*> batch;
  std::vector<SequenceLabels> labels;
  for (const auto& w : p.windows) {
    batch.push_back(&w);
    labels.push_back(training::labels_of(w));
  }
  auto loss = [&](LossWeights w) {
    ad::Tape tape;
    return training::multitask_loss(tape, net.forward(tape, batch, p.data.features), labels, w).value().item();
  };
  auto perturb = [&](std::initializer_list<const char*> names, double delta) {
    for (auto* n : names)
      for (auto& v : net.params().at(n).value.values()) v += delta;
  };
  const double base_no_intent = loss({0.0, 1.0, 1.0});
  const double base_intent_only = loss({1.0, 0.0, 0.0});
  perturb({"head.intent.w", "head.intent.b"}, 0.37);
  EXPECT_EQ(loss({0.0, 1.0, 1.0}), base_no_intent);
  EXPECT_NE(loss({1.0, 0.0, 0.0}), base_intent_only);
  const double intent_after = loss({1.0, 0.0, 0.0});
  perturb({"head.action.w", "head.action.b", "head.future.w", "head.future.b"}, -0.21);
  EXPECT_EQ(loss({1.0, 0.0, 0.0}), intent_after);
}

TEST(Schedule, MidpointMonotoneAndBounded) {
  EXPECT_EQ(training::omega1_schedule(500, 500, 0.02), 0.5);
  double prev = 0;
  for (int it = 0; it <= 1000; ++it) {
    const double w = training::omega1_schedule(it, 500, 0.02);
    EXPECT_GE(w, prev);
    EXPECT_GT(w, 0.0);
    EXPECT_LT(w, 1.0);
    prev = w;
  }
  // defaults: m = total / 2, k = 10 / m
  const double total = 1750, m = total / 2, k = 10 / m;
  EXPECT_LT(training::omega1_schedule(0, m, k), 0.01);
  EXPECT_GT(training::omega1_schedule(total, m, k), 0.99);
  EXPECT_EQ(training::omega1_schedule(1e9, m, k), 1.0);
  EXPECT_THROW(training::omega1_schedule(0, 1, 0), std::invalid_argument);
}

TEST(AdamTest, ZeroGradientIsAFixedPoint) {
  ad::ParameterStore store;
  auto& p = store.add("p", ad::Tensor::row({1.0, -2.0}));
  training::Adam adam(store, {1e-3});
  for (int i = 0; i < 5; ++i) adam.step(store);
  EXPECT_EQ(p.value, ad::Tensor::row({1.0, -2.0}));
}

TEST(AdamTest, FirstStepIsMinusLearningRate) {
  ad::ParameterStore store;
  auto& p = store.add("p", ad::Tensor::scalar(0.5));
  training::Adam adam(store, {1e-3});
  p.grad[0] = 1.0;
  adam.step(store);
  EXPECT_NEAR(p.value[0], 0.5 - 1e-3, 1e-10);
}

TEST(AdamTest, ConvergesOnQuadraticBowl) {
  ad::ParameterStore store;
  auto& p = store.add("p", ad::Tensor::row({3.0, -4.0, 0.5}));
  const std::vector<double> target{1.0, 2.0, -1.0}, curvature{1.0, 4.0, 0.25};
  training::Adam adam(store, {1e-2});
  int steps = 0;
  auto distance = [&] {
    double d = 0;
    for (std::size_t i = 0; i < 3; ++i) d = std::max(d, std::abs(p.value[i] - target[i]));
    return d;
  };
  for (; steps < 10000 && distance() > 1e-6; ++steps) {
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = curvature[i] * (p.value[i] - target[i]);
    adam.step(store);
  }
  EXPECT_LE(distance(), 1e-6);
  EXPECT_LE(steps, 10000);
}

TEST(AdamTest, NonFiniteGradientIsRejectedBeforeUpdate) {
  ad::ParameterStore store;
  auto& a = store.add("a", ad::Tensor::scalar(1.0));
  auto& b = store.add("b", ad::Tensor::scalar(1.0));
  training::Adam adam(store, {1e-3});
  a.grad[0] = 1.0;
  b.grad[0] = std::nan("");
  EXPECT_THROW(adam.step(store), ad::NumericError);
  EXPECT_EQ(a.value[0], 1.0);
}

TEST(GradientFlow, EveryReachableGroupReceivesGradient) {
  auto p = diagnostics::toy_problem();
  // two instances of every object type so every attention block is live
  for (auto& w : p.windows)
    for (auto& f : w.frames) {
      std::vector<data::TrafficObjectRecord> extra;
      for (std::size_t k = 0; k < data::kObjectTypeCount; ++k) {
        data::TrafficObjectRecord r{static_cast<data::ObjectType>(k), {100.0 + 40 * k, 300, 160.0 + 40 * k, 420}, {}, {}, {}};
        if (r.object_type == data::ObjectType::traffic_light) {
          r.light_type = data::LightType::general;
          r.light_state = data::LightState::yellow;
        }
        if (r.object_type == data::ObjectType::traffic_sign) r.sign_type = data::SignType::stop;
        extra.push_back(r);
        r.box = r.box.translated(300, -50);
        extra.push_back(r);
      }
      f.objects = extra;
    }
  for (std::string_view ablation : {"i", "a", "ia", "af", "iaf", "full"}) {
    auto cfg = p.config;
    cfg.ablation = model::Ablation::parse(ablation);
    model::BehaviorModel net(cfg);
    std::vector<const data::SequenceSample*> batch;
    std::vector<SequenceLabels> labels;
    for (const auto& w : p.windows) {
      batch.push_back(&w);
      labels.push_back(training::labels_of(w));
    }
    ad::Tape tape;
    tape.backward(training::multitask_loss(tape, net.forward(tape, batch, p.data.features), labels, {0.5, 1.0, 1.0}));
    for (const auto& param : net.params()) {
      double norm = 0;
      for (double g : param.grad.values()) norm += g * g;
      EXPECT_GT(norm, 0.0) << ablation << ": " << param.name;
    }
  }
}

TEST(TrainConfigTest, JsonRoundTripAndUnknownKeys) {
  auto c = training::TrainConfig::desk();
  c.seed = 9;
  c.ablation = model::Ablation::parse("iaf");
  c.schedule_midpoint = 100.0;
  const auto back = training::train_config_from_json(training::to_json(c));
  EXPECT_EQ(training::to_json(back), training::to_json(c));
  EXPECT_THROW(training::train_config_from_json({{"learning_rat", 0.1}}), std::invalid_argument);
  EXPECT_THROW(training::train_config_from_json({{"sequence_length", 5}, {"horizon", 5}}), std::invalid_argument);
  EXPECT_THROW(training::train_config_from_json({{"learning_rate", 0.0}}), std::invalid_argument);
  const auto ref = training::train_config_from_json({{"profile", "reference"}});
  EXPECT_EQ(ref.learning_rate, 1e-5);
  EXPECT_EQ(ref.batch_size, 128u);
  EXPECT_EQ(ref.sequence_length, 30u);
  EXPECT_EQ(ref.horizon, 5u);
}

TEST(Train, LossDecreasesOnSmallSet) {
  auto data = tiny_data(2);
  // one 60-frame train track, stride 3, length 6 -> 19 windows in a single batch
  std::erase_if(data.dataset.tracks, [](const data::Track& t) { return t.split == data::Split::train && t.track_id.find("_b") != std::string::npos; });
  auto cfg = tiny_train_config();
  cfg.sequence_length = 6;
  cfg.stride = 3;
  cfg.batch_size = 20;
  cfg.epochs = 200;
  cfg.ablation = model::Ablation::parse("ia");
  // omega1 pinned at 1 so the objective is fixed
  cfg.schedule_midpoint = -1.0;
  cfg.schedule_steepness = 100.0;
  const auto r = training::train(cfg, data.dataset, data.features);
  ASSERT_EQ(r.batch_losses.size(), 200u);
  EXPECT_LT(r.batch_losses.back(), 0.5 * r.batch_losses.front());
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto data = tiny_data(4);
  const auto cfg = tiny_train_config();
  std::ostringstream log_a, log_b;
  const auto a = training::train(cfg, data.dataset, data.features, {&log_a, {}});
  const auto b = training::train(cfg, data.dataset, data.features, {&log_b, {}});
  EXPECT_EQ(a.batch_losses, b.batch_losses);
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_EQ(checkpoint::serialize(*a.best), checkpoint::serialize(*b.best));
  auto other = cfg;
  other.seed = 5;
  EXPECT_NE(training::train(other, data.dataset, data.features).batch_losses, a.batch_losses);
}

TEST(Train, LogAndCheckpointAreWritten) {
  const auto data = tiny_data(4);
  const auto dir = std::filesystem::temp_directory_path() / "crosswatch_train_test";
  std::filesystem::remove_all(dir);
  std::ostringstream log;
  const auto r = training::train(tiny_train_config(), data.dataset, data.features, {&log, dir});
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "train.lock"));
  std::istringstream lines(log.str());
  std::string line;
  std::getline(lines, line);
  const auto header = nlohmann::json::parse(line);
  EXPECT_EQ(header["optimizer"]["name"], "adam");
  std::size_t epochs = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (auto key : {"epoch", "iteration", "omega1", "train_loss", "val"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_TRUE(j["val"].contains("auc"));
    ++epochs;
  }
  EXPECT_EQ(epochs, 2u);
  const auto loaded = checkpoint::load(dir / "best.ckpt");
  EXPECT_EQ(loaded.metadata["epoch"], r.best_epoch);
  std::filesystem::remove_all(dir);
}

TEST(Train, HeldLockRefusesToStart) {
  const auto data = tiny_data(2);
  const auto dir = std::filesystem::temp_directory_path() / "crosswatch_lock_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "train.lock") << "123\n";
  EXPECT_THROW(training::train(tiny_train_config(), data.dataset, data.features, {nullptr, dir}), std::runtime_error);
  EXPECT_TRUE(std::filesystem::exists(dir / "train.lock"));
  std::filesystem::remove_all(dir);
}

TEST(Train, DivergenceNamesBatch) {
  auto data = tiny_data(2);
  data::FeatureStore poisoned(8);
  for (const auto& key : data.features.keys()) {
    auto v = data.features.find(key);
    std::vector<float> copy(v.begin(), v.end());
    copy[0] = std::numeric_limits<float>::quiet_NaN();
    poisoned.insert(key, copy);
  }
  try {
    training::train(tiny_train_config(), data.dataset, poisoned);
    FAIL();
  } catch (const training::DivergenceError& e) {
    EXPECT_EQ(e.batch(), 0u);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

TEST(Train, RequiresTrainAndValSplits) {
  auto data = tiny_data(2);
  std::erase_if(data.dataset.tracks, [](const data::Track& t) { return t.split == data::Split::val; });
  EXPECT_THROW(training::train(tiny_train_config(), data.dataset, data.features), std::invalid_argument);
}

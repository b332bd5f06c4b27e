#include "crosswatch/metrics.hpp"
#include "crosswatch/synthetic.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace crosswatch;
using metrics::EvalRecord;

namespace {

std::vector<EvalRecord> intent_records(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<EvalRecord> r;
  for (std::size_t i = 0; i < scores.size(); ++i) r.push_back({scores[i], labels[i], {}, 0});
  return r;
}

// Scores drawn from a coarse grid so ties are common.
std::vector<EvalRecord> random_fixture(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(2, 500), grid(0, 20), coin(0, 1);
  const int n = size(rng);
  std::vector<EvalRecord> r;
  for (int i = 0; i < n; ++i) r.push_back({grid(rng) / 20.0, coin(rng), {}, 0});
  r[0].intent_label = 1;
  r[1].intent_label = 0;
  return r;
}

double brute_force_auc(const std::vector<EvalRecord>& r) {
  double wins = 0, pairs = 0;
  for (const auto& p : r)
    for (const auto& n : r) {
      if (!(p.intent_label == 1 && n.intent_label == 0)) continue;
      pairs += 1;
      if (p.intent_score > n.intent_score) wins += 1;
      else if (p.intent_score == n.intent_score) wins += 0.5;
    }
  return wins / pairs;
}

// Precision/recall at every distinct threshold, then the interpolated area.
double brute_force_ap(const std::vector<double>& scores, const std::vector<int>& relevant) {
  std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
  const double total = static_cast<double>(std::count(relevant.begin(), relevant.end(), 1));
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (double tau : thresholds) {
    double tp = 0, retrieved = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= tau) {
        retrieved += 1;
        tp += relevant[i];
      }
    pr.emplace_back(tp / total, tp / retrieved);
  }
  double ap = 0, prev_recall = 0;
  for (const auto& [r, _] : pr) {
    double best = 0;
    for (const auto& [r2, p2] : pr)
      if (r2 >= r) best = std::max(best, p2);
    ap += (r - prev_recall) * best;
    prev_recall = r;
  }
  return ap;
}

}  // namespace

TEST(Auc, MatchesBruteForceOnRandomFixtures) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = random_fixture(rng);
    ASSERT_LE(r.size(), 500u);
    EXPECT_NEAR(*metrics::auc(r), brute_force_auc(r), 1e-12) << "fixture " << trial;
  }
}

TEST(Auc, InvariantUnderStrictlyMonotoneTransform) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = random_fixture(rng);
    const double base = *metrics::auc(r);
    for (auto& rec : r) rec.intent_score = std::exp(3.0 * rec.intent_score) - 7.0;
    EXPECT_EQ(*metrics::auc(r), base);
  }
}

TEST(Auc, KnownValuesAndSingleClass) {
  EXPECT_EQ(*metrics::auc(intent_records({0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0})), 1.0);
  EXPECT_EQ(*metrics::auc(intent_records({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0})), 0.0);
  // one tied pair out of four
  EXPECT_EQ(*metrics::auc(intent_records({0.5, 0.9, 0.5, 0.1}, {1, 1, 0, 0})), 0.875);
  EXPECT_FALSE(metrics::auc(intent_records({0.1, 0.2}, {1, 1})).has_value());
}

TEST(DeltaS, DirectArithmetic) {
  EXPECT_DOUBLE_EQ(*metrics::delta_s(intent_records({0.9, 0.7, 0.2, 0.4}, {1, 1, 0, 0})), 0.5);
  EXPECT_EQ(*metrics::delta_s(intent_records({1, 1, 0, 0}, {1, 1, 0, 0})), 1.0);
  EXPECT_FALSE(metrics::delta_s(intent_records({0.3}, {0})).has_value());
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_fixture(rng);
    double sp = 0, sn = 0, np = 0, nn = 0;
    for (const auto& rec : r) (rec.intent_label ? sp : sn) += rec.intent_score, (rec.intent_label ? np : nn) += 1;
    EXPECT_EQ(*metrics::delta_s(r), sp / np - sn / nn);
  }
}

TEST(DeltaS, ShiftInvariantScaleCovariant) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = random_fixture(rng);
    const double base = *metrics::delta_s(r);
    auto shifted = r, scaled = r;
    for (auto& rec : shifted) rec.intent_score += 0.25;
    for (auto& rec : scaled) rec.intent_score *= 3.0;
    EXPECT_NEAR(*metrics::delta_s(shifted), base, 1e-12);
    EXPECT_NEAR(*metrics::delta_s(scaled), 3.0 * base, 1e-12);
  }
}

TEST(NaiveClassifier, ConstantScoreGivesHalfAucZeroMargin) {
  std::mt19937_64 rng(10);
  auto r = random_fixture(rng);
  for (auto& rec : r) rec.intent_score = 1.0;
  EXPECT_EQ(*metrics::auc(r), 0.5);
  EXPECT_EQ(*metrics::delta_s(r), 0.0);
}

TEST(Thresholded, StrictThresholdAndCounts) {
  const auto r = intent_records({0.5, 0.51, 0.9, 0.2, 0.6}, {1, 1, 0, 0, 1});
  const auto s = metrics::thresholded_scores(r);
  // 0.5 is not a positive prediction
  EXPECT_EQ(s.tp, 2u);
  EXPECT_EQ(s.fn, 1u);
  EXPECT_EQ(s.fp, 1u);
  EXPECT_EQ(s.tn, 1u);
  EXPECT_DOUBLE_EQ(s.accuracy, 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(s.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.f1, 4.0 / 6.0);
  const auto none = metrics::thresholded_scores(intent_records({0.1, 0.2}, {0, 0}));
  EXPECT_TRUE(none.precision_undefined);
  EXPECT_TRUE(none.f1_undefined);
}

TEST(Thresholded, ConsistentWithReportCounts) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto r = random_fixture(rng);
    const auto rep = metrics::summarize(r, metrics::Setting::original, true, false);
    const auto& s = *rep.thresholded;
    EXPECT_EQ(s.tp + s.fn, rep.positives);
    EXPECT_EQ(s.fp + s.tn, rep.negatives);
    EXPECT_EQ(rep.frames, r.size());
    EXPECT_NEAR(s.accuracy * static_cast<double>(r.size()), static_cast<double>(s.tp + s.tn), 1e-9);
  }
}

TEST(AveragePrecision, MatchesBruteForceEnumeration) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> grid(0, 12), coin(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(50);
    std::vector<int> relevant(50);
    for (std::size_t i = 0; i < 50; ++i) {
      scores[i] = grid(rng) / 12.0;
      relevant[i] = coin(rng) == 0;
    }
    relevant[0] = 1;
    EXPECT_NEAR(metrics::average_precision(scores, relevant), brute_force_ap(scores, relevant), 1e-12) << trial;
  }
}

TEST(AveragePrecision, HandFixture) {
  // ranks: R N R N -> precision 1 at recall .5, 2/3 at recall 1
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<int> rel{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(metrics::average_precision(s, rel), 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
}

TEST(ActionMapTest, PerfectPredictionsGiveOne) {
  std::vector<EvalRecord> r;
  for (int i = 0; i < 70; ++i) {
    std::vector<double> d(7, 0.0);
    d[static_cast<std::size_t>(i % 7)] = 1.0;
    r.push_back({0.5, 0, d, i % 7});
  }
  EXPECT_EQ(metrics::action_map(r).map, 1.0);
}

TEST(ActionMapTest, UniformPredictionsGivePrevalence) {
  std::vector<EvalRecord> r;
  for (int i = 0; i < 700; ++i) r.push_back({0.5, 0, std::vector<double>(7, 1.0 / 7.0), i % 7});
  const auto m = metrics::action_map(r);
  for (const auto& ap : m.per_class) EXPECT_NEAR(*ap, 1.0 / 7.0, 1e-12);
}

TEST(ActionMapTest, AbsentClassesAreExcluded) {
  std::vector<EvalRecord> r;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> d(7, 0.0);
    d[static_cast<std::size_t>(i % 2)] = 1.0;
    r.push_back({0.5, 0, d, i % 2});
  }
  const auto m = metrics::action_map(r);
  EXPECT_EQ(m.map, 1.0);
  EXPECT_TRUE(m.per_class[0] && m.per_class[1]);
  for (std::size_t c = 2; c < 7; ++c) EXPECT_FALSE(m.per_class[c].has_value());
}

TEST(Report, JsonCarriesMetadata) {
  std::mt19937_64 rng(13);
  auto r = random_fixture(rng);
  for (auto& rec : r) {
    rec.action_dist = std::vector<double>(7, 1.0 / 7.0);
    rec.action_label = 2;
  }
  const auto j = metrics::summarize(r, metrics::Setting::event, true, true).to_json();
  EXPECT_EQ(j["setting"], "event");
  for (auto key : {"accuracy", "f1", "precision", "auc", "delta_s", "action_map"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j.contains("metadata"));
}

namespace {

synthetic::SyntheticData eval_data() {
  synthetic::GeneratorConfig g;
  g.train = {2, 2};
  g.val = {2, 2};
  g.test = {10, 10};
  g.feature_dim = 16;
  return synthetic::generate(g, 31);
}

model::ModelConfig eval_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.visual_dim = 16;
  c.hidden = 16;
  c.horizon = 3;
  c.relation.normalize_coordinates = true;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Evaluate, DeterministicAndFullyPopulated) {
  const auto d = eval_data();
  const model::BehaviorModel m(eval_model(1));
  for (auto setting : {metrics::Setting::original, metrics::Setting::event}) {
    metrics::EvalOptions opt;
    opt.setting = setting;
    opt.seed = 4;
    const auto a = metrics::evaluate(m, d.dataset, d.features, opt);
    const auto b = metrics::evaluate(m, d.dataset, d.features, opt);
    EXPECT_EQ(a.report.to_json(), b.report.to_json());
    EXPECT_TRUE(a.report.thresholded && a.report.auc && a.report.delta_s && a.report.action);
    std::size_t frames = 0;
    for (const auto& s : metrics::evaluation_sequences(d.dataset, opt)) frames += s.length();
    EXPECT_EQ(a.report.frames, frames);
  }
}

TEST(Evaluate, EventSettingNeedsCrossings) {
  auto d = eval_data();
  std::erase_if(d.dataset.tracks, [](const data::Track& t) { return data::crossing_event(t).has_value(); });
  metrics::EvalOptions opt;
  opt.setting = metrics::Setting::event;
  EXPECT_THROW(metrics::evaluate(model::BehaviorModel(eval_model(1)), d.dataset, d.features, opt), std::invalid_argument);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const auto d = eval_data();
  std::vector<double> aucs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    aucs.push_back(*metrics::evaluate(model::BehaviorModel(eval_model(seed)), d.dataset, d.features, {}).report.auc);
  std::sort(aucs.begin(), aucs.end());
  EXPECT_GE(aucs[2], 0.35);
  EXPECT_LE(aucs[2], 0.65);
}

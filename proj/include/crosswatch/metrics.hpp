#pragma once

// Intent and action evaluation.
//
// Intent: accuracy / F1 / precision at the strict rule score > 0.5, rank AUC
// with ties credited 1/2, and delta_s, the difference between the mean score
// of positive and negative records. Action: per-class all-points interpolated
// average precision and its macro mean over classes present in the labels.

#include "crosswatch/behavior_model.hpp"
#include "crosswatch/data_model.hpp"
#include "crosswatch/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace crosswatch::metrics {

struct EvalRecord {
  double intent_score = 0.0;
  int intent_label = 0;
  std::vector<double> action_dist;
  int action_label = 0;
};

struct ThresholdScores {
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  bool f1_undefined = false;         // 2TP + FP + FN == 0
  bool precision_undefined = false;  // TP + FP == 0
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline ThresholdScores thresholded_scores(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("thresholded_scores: no records");
  ThresholdScores s;
  for (const auto& r : records) {
    const bool predicted = r.intent_score > 0.5;
    if (predicted && r.intent_label) ++s.tp;
    else if (predicted) ++s.fp;
    else if (r.intent_label) ++s.fn;
    else ++s.tn;
  }
  const auto n = static_cast<double>(records.size());
  s.accuracy = static_cast<double>(s.tp + s.tn) / n;
  if (s.tp + s.fp == 0) s.precision_undefined = true;
  else s.precision = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
  if (2 * s.tp + s.fp + s.fn == 0) s.f1_undefined = true;
  else s.f1 = 2.0 * static_cast<double>(s.tp) / static_cast<double>(2 * s.tp + s.fp + s.fn);
  return s;
}

/// Probability that a random positive outranks a random negative (ties 1/2).
/// Absent when either class is missing.
inline std::optional<double> auc(std::span<const EvalRecord> records) {
  std::vector<std::pair<double, int>> v;
  v.reserve(records.size());
  std::uint64_t pos = 0, neg = 0;
  for (const auto& r : records) {
    v.emplace_back(r.intent_score, r.intent_label);
    (r.intent_label ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // twice the count of correctly ordered pairs, in exact integer arithmetic
  std::uint64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    for (; j < v.size() && v[j].first == v[i].first; ++j) (v[j].second ? p : n) += 1;
    twice += 2 * p * neg_below + p * n;
    neg_below += n;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

inline std::optional<double> delta_s(std::span<const EvalRecord> records) {
  double sp = 0, sn = 0;
  std::size_t np = 0, nn = 0;
  for (const auto& r : records) {
    if (r.intent_label) {
      sp += r.intent_score;
      ++np;
    } else {
      sn += r.intent_score;
      ++nn;
    }
  }
  if (np == 0 || nn == 0) return std::nullopt;
  return sp / static_cast<double>(np) - sn / static_cast<double>(nn);
}

/// All-points interpolated AP of one ranking. Tied scores form one threshold.
inline double average_precision(std::span<const double> scores, std::span<const int> relevant) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto total = static_cast<double>(std::count(relevant.begin(), relevant.end(), 1));
  if (total == 0) return 0.0;
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) (relevant[order[j]] ? tp : fp) += 1;
    recall.push_back(tp / total);
    precision.push_back(tp / (tp + fp));
    i = j;
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev = 0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev) * precision[k];
    prev = recall[k];
  }
  return ap;
}

struct ActionMap {
  double map = 0.0;
  std::array<std::optional<double>, data::kActionCount> per_class{};  // absent classes are empty
};

inline ActionMap action_map(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("action_map: no records");
  ActionMap out;
  std::vector<double> scores(records.size());
  std::vector<int> relevant(records.size());
  double total = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < data::kActionCount; ++c) {
    bool any = false;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].action_dist.size() != data::kActionCount)
        throw std::invalid_argument("action_map: record " + std::to_string(i) + " has no 7-class distribution");
      scores[i] = records[i].action_dist[c];
      relevant[i] = records[i].action_label == static_cast<int>(c) ? 1 : 0;
      any = any || relevant[i];
    }
    if (!any) continue;
    out.per_class[c] = average_precision(scores, relevant);
    total += *out.per_class[c];
    ++present;
  }
  out.map = present ? total / static_cast<double>(present) : 0.0;
  return out;
}

enum class Setting { original, event };

inline Setting parse_setting(std::string_view s) {
  if (s == "original") return Setting::original;
  if (s == "event") return Setting::event;
  throw std::invalid_argument("unknown setting '" + std::string(s) + "' (expected original or event)");
}

inline std::string_view to_string(Setting s) { return s == Setting::original ? "original" : "event"; }

struct MetricsReport {
  Setting setting = Setting::original;
  std::size_t frames = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::optional<ThresholdScores> thresholded;
  std::optional<double> auc;
  std::optional<double> delta_s;
  std::optional<ActionMap> action;

  nlohmann::ordered_json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
    nlohmann::ordered_json j{{"setting", metrics::to_string(setting)},
                             {"frames", frames},
                             {"positives", positives},
                             {"negatives", negatives}};
    if (thresholded) {
      j["accuracy"] = thresholded->accuracy;
      j["f1"] = thresholded->f1;
      j["precision"] = thresholded->precision;
      j["confusion"] = {{"tp", thresholded->tp}, {"fp", thresholded->fp}, {"tn", thresholded->tn}, {"fn", thresholded->fn}};
      j["flags"] = {{"f1_undefined", thresholded->f1_undefined}, {"precision_undefined", thresholded->precision_undefined}};
    } else {
      j["accuracy"] = nullptr;
      j["f1"] = nullptr;
      j["precision"] = nullptr;
    }
    j["auc"] = opt(auc);
    j["delta_s"] = opt(delta_s);
    if (action) {
      j["action_map"] = action->map;
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (std::size_t c = 0; c < data::kActionCount; ++c)
        per[std::string(data::to_string(static_cast<data::SemanticAction>(c)))] = opt(action->per_class[c]);
      j["per_class_ap"] = per;
    } else {
      j["action_map"] = nullptr;
    }
    j["metadata"] = {{"threshold_rule", "score > 0.5"},
                     {"auc_ties", "half credit"},
                     {"ap_recipe", "all-points interpolated AP per class, macro mean over classes present"}};
    return j;
  }

  static std::string csv_header() { return "setting,frames,positives,negatives,accuracy,f1,precision,auc,delta_s,action_map"; }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(17);
    auto put = [&](const std::optional<double>& v) {
      os << ',';
      if (v) os << *v;
    };
    os << metrics::to_string(setting) << ',' << frames << ',' << positives << ',' << negatives;
    put(thresholded ? std::optional(thresholded->accuracy) : std::nullopt);
    put(thresholded ? std::optional(thresholded->f1) : std::nullopt);
    put(thresholded ? std::optional(thresholded->precision) : std::nullopt);
    put(auc);
    put(delta_s);
    put(action ? std::optional(action->map) : std::nullopt);
    return os.str();
  }
};

/// Computes every metric the record set supports.
inline MetricsReport summarize(std::span<const EvalRecord> records, Setting setting, bool has_intent, bool has_action) {
  MetricsReport r;
  r.setting = setting;
  r.frames = records.size();
  for (const auto& rec : records) (rec.intent_label ? r.positives : r.negatives) += 1;
  if (records.empty()) return r;
  if (has_intent) {
    r.thresholded = thresholded_scores(records);
    r.auc = auc(records);
    r.delta_s = delta_s(records);
  }
  if (has_action) r.action = action_map(records);
  return r;
}

struct EvalOptions {
  Setting setting = Setting::original;
  data::Split split = data::Split::test;
  std::size_t window = 30;  // event setting window length
  double min_lead_s = 1.0;
  double max_lead_s = 2.0;
  std::uint64_t seed = 0;
  std::size_t max_batch = 64;
};

struct Evaluation {
  MetricsReport report;
  std::vector<EvalRecord> records;
};

/// Sequences evaluated under a setting: whole tracks for the original setting,
/// event-to-crossing windows otherwise.
inline std::vector<data::SequenceSample> evaluation_sequences(const data::Dataset& ds, const EvalOptions& opt) {
  const auto tracks = ds.split(opt.split);
  if (opt.setting == Setting::original) {
    std::vector<data::SequenceSample> out;
    for (const auto* t : tracks) out.push_back(data::whole_track(*t));
    return out;
  }
  if (std::none_of(tracks.begin(), tracks.end(), [](const data::Track* t) { return data::crossing_event(*t).has_value(); }))
    throw std::invalid_argument("event setting: the " + std::string(data::to_string(opt.split)) +
                                " split contains no crossing events");
  return data::sample_event_to_crossing(tracks, opt.window, opt.min_lead_s, opt.max_lead_s, ds.fps, opt.seed).samples;
}

/// Runs the model on one sequence at a time (batched by equal length) and
/// pools one record per frame.
inline Evaluation evaluate(const model::BehaviorModel& m, const data::Dataset& ds,
                           const data::VisualFeatureProvider& features, const EvalOptions& opt) {
  const auto sequences = evaluation_sequences(ds, opt);
  // group equal lengths in order of first appearance
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < sequences.size(); ++i) by_length[sequences[i].length()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (const auto& [len, idx] : by_length)
    for (std::size_t s = 0; s < idx.size(); s += opt.max_batch)
      batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                           idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + opt.max_batch)));

  std::vector<std::vector<model::StepOutput>> outputs(sequences.size());
  parallel_for(batches.size(), [&](std::size_t b) {
    ad::Tape tape;
    std::vector<const data::SequenceSample*> batch;
    for (auto i : batches[b]) batch.push_back(&sequences[i]);
    const auto steps = m.forward(tape, batch, features);
    for (std::size_t r = 0; r < batch.size(); ++r) outputs[batches[b][r]] = model::BehaviorModel::to_outputs(steps, r);
  });

  Evaluation ev;
  const bool has_intent = m.config().ablation.intent;
  const bool has_action = m.config().ablation.action;
  for (std::size_t i = 0; i < sequences.size(); ++i)
    for (std::size_t t = 0; t < sequences[i].length(); ++t) {
      const auto& f = sequences[i].frames[t];
      const auto& o = outputs[i][t];
      ev.records.push_back(EvalRecord{o.intent_score.value_or(0.5), f.intent, o.action_dist,
                                      static_cast<int>(f.semantic_action)});
    }
  ev.report = summarize(ev.records, opt.setting, has_intent, has_action);
  return ev;
}

}  // namespace crosswatch::metrics

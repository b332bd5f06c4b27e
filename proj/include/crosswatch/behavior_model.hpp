#pragma once

// Multi-task intent/action network.
//
// Per frame t the encoder GRU consumes
//   [embed(visual), embed(box), future_feature_{t-1}, f_rel(h_{t-1})]
// where the last two slices exist only when the future stream or the relation
// network is enabled. From h_t the model classifies intent and the present
// action, then unrolls a decoder GRU for `horizon` steps starting at d_0 = h_t;
// the mean of the decoder states is the future feature fed to step t+1.

#include "crosswatch/autodiff.hpp"
#include "crosswatch/data_model.hpp"
#include "crosswatch/layers.hpp"
#include "crosswatch/relation_net.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crosswatch::model {

/// Which heads and streams are active (the ablation lattice).
struct Ablation {
  bool intent = true;
  bool action = true;
  bool future = true;
  bool relation = true;

  static Ablation parse(std::string_view name) {
    if (name == "i") return {true, false, false, false};
    if (name == "a") return {false, true, false, false};
    if (name == "ia") return {true, true, false, false};
    if (name == "af") return {false, true, true, false};
    if (name == "iaf") return {true, true, true, false};
    if (name == "full") return {true, true, true, true};
    throw std::invalid_argument("unknown ablation '" + std::string(name) + "' (expected i, a, ia, af, iaf or full)");
  }

  std::string name() const {
    if (intent && action && future && relation) return "full";
    std::string s;
    if (intent) s += 'i';
    if (action) s += 'a';
    if (future) s += 'f';
    if (relation) s += 'r';
    return s;
  }

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct ModelConfig {
  std::size_t visual_dim = 64;
  std::size_t hidden = 128;
  std::size_t visual_embed = 128;
  std::size_t box_embed = 32;
  std::size_t action_embed = 32;  // decoder input width
  std::size_t horizon = 5;
  relation::RelationConfig relation;
  Ablation ablation;
  std::uint64_t seed = 0;

  void validate() const {
    if (visual_dim < 1 || hidden < 1 || visual_embed < 1 || box_embed < 1 || action_embed < 1)
      throw std::invalid_argument("model config: all widths must be positive");
    if (horizon < 1) throw std::invalid_argument("model config: horizon must be >= 1");
    if (!ablation.intent && !ablation.action)
      throw std::invalid_argument("model config: at least one of the intent or action heads is required");
    if (relation.embed < 1 || relation.attention_hidden < 1)
      throw std::invalid_argument("model config: relation widths must be positive");
  }

  std::size_t encoder_input() const {
    return visual_embed + box_embed + (ablation.future ? hidden : 0) +
           (ablation.relation ? relation::kBlockCount * relation.embed : 0);
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.visual_dim == b.visual_dim && a.hidden == b.hidden && a.visual_embed == b.visual_embed &&
           a.box_embed == b.box_embed && a.action_embed == b.action_embed && a.horizon == b.horizon &&
           a.relation.embed == b.relation.embed && a.relation.attention_hidden == b.relation.attention_hidden &&
           a.relation.normalize_coordinates == b.relation.normalize_coordinates &&
           a.relation.image_width == b.relation.image_width && a.relation.image_height == b.relation.image_height &&
           a.ablation == b.ablation && a.seed == b.seed;
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {
      {"visual_dim", c.visual_dim},
      {"hidden", c.hidden},
      {"visual_embed", c.visual_embed},
      {"box_embed", c.box_embed},
      {"action_embed", c.action_embed},
      {"horizon", c.horizon},
      {"relation_embed", c.relation.embed},
      {"attention_hidden", c.relation.attention_hidden},
      {"normalize_coordinates", c.relation.normalize_coordinates},
      {"image_width", c.relation.image_width},
      {"image_height", c.relation.image_height},
      {"ablation", {{"intent", c.ablation.intent}, {"action", c.ablation.action}, {"future", c.ablation.future}, {"relation", c.ablation.relation}}},
      {"seed", c.seed},
  };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.visual_dim = j.at("visual_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.visual_embed = j.at("visual_embed").get<std::size_t>();
  c.box_embed = j.at("box_embed").get<std::size_t>();
  c.action_embed = j.at("action_embed").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.relation.embed = j.at("relation_embed").get<std::size_t>();
  c.relation.attention_hidden = j.at("attention_hidden").get<std::size_t>();
  c.relation.normalize_coordinates = j.at("normalize_coordinates").get<bool>();
  c.relation.image_width = j.at("image_width").get<double>();
  c.relation.image_height = j.at("image_height").get<double>();
  const auto& a = j.at("ablation");
  c.ablation = {a.at("intent").get<bool>(), a.at("action").get<bool>(), a.at("future").get<bool>(),
                a.at("relation").get<bool>()};
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// Per-frame model output as plain values.
struct StepOutput {
  std::optional<double> intent_score;
  std::vector<double> action_dist;                // empty without the action head
  std::vector<std::vector<double>> future_dists;  // horizon x 7, empty without the decoder
  std::vector<relation::TypeAttention> attention;
  std::vector<double> hidden;
};

/// Per-frame tape handles for a batch.
struct StepVars {
  ad::Var intent_logit;  // [B, 1]
  ad::Var action_logits;  // [B, 7]
  std::vector<ad::Var> future_logits;  // horizon x [B, 7]
  ad::Var hidden;          // [B, H]
  ad::Var future_feature;  // [B, H]; zeros without the decoder
  std::vector<std::vector<relation::TypeAttention>> attention;
};

/// Encoder recurrence state.
struct EncoderState {
  ad::Var h;
  ad::Var future_feature;
  std::size_t step = 0;
};

struct FuturePrediction {
  std::vector<ad::Var> logits;  // horizon x [B, 7]
  std::vector<ad::Var> dists;
  std::vector<ad::Var> states;
  ad::Var future_feature;
};

class BehaviorModel {
 public:
  explicit BehaviorModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto seed = cfg_.seed;
    const auto h = cfg_.hidden;
    visual_ = nn::Linear::create(params_, "enc.visual", cfg_.visual_dim, cfg_.visual_embed, seed);
    box_ = nn::Linear::create(params_, "enc.box", 4, cfg_.box_embed, seed);
    if (cfg_.ablation.relation) relation_ = relation::RelationNet(params_, cfg_.relation, h, seed);
    encoder_ = nn::GruCell::create(params_, "enc.gru", cfg_.encoder_input(), h, seed);
    if (cfg_.ablation.intent) intent_head_ = nn::Linear::create(params_, "head.intent", h, 1, seed);
    if (cfg_.ablation.action) action_head_ = nn::Linear::create(params_, "head.action", h, data::kActionCount, seed);
    if (cfg_.ablation.future) {
      start_token_ = &params_.add("dec.start", nn::uniform_init({1, cfg_.action_embed}, cfg_.action_embed, seed, "dec.start"));
      action_embed_ = nn::Linear::create(params_, "dec.action_embed", data::kActionCount, cfg_.action_embed, seed);
      decoder_ = nn::GruCell::create(params_, "dec.gru", cfg_.action_embed, h, seed);
      future_head_ = nn::Linear::create(params_, "head.future", h, data::kActionCount, seed);
    }
  }

  BehaviorModel(const BehaviorModel&) = delete;
  BehaviorModel& operator=(const BehaviorModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  const relation::RelationNet* relation_net() const { return cfg_.ablation.relation ? &relation_ : nullptr; }

  EncoderState initial_state(ad::Tape& tape, std::size_t batch) const {
    return {tape.constant(ad::Tensor({batch, cfg_.hidden})), tape.constant(ad::Tensor({batch, cfg_.hidden})), 0};
  }

  /// One encoder step. `relation` must be valid iff the relation stream is on.
  EncoderState encode_step(ad::Tape& tape, const ad::Var& visual, const ad::Var& boxes, const ad::Var* relation,
                           const EncoderState& state) const {
    if (visual.cols() != cfg_.visual_dim)
      throw ad::ShapeError("encode_step: visual feature width " + std::to_string(visual.cols()) +
                           " does not match configured " + std::to_string(cfg_.visual_dim));
    if ((relation != nullptr) != cfg_.ablation.relation)
      throw std::invalid_argument("encode_step: relation feature presence does not match the configuration");
    std::vector<ad::Var> parts{ad::tanh(visual_(tape, visual)), ad::tanh(box_(tape, boxes))};
    if (cfg_.ablation.future) parts.push_back(state.future_feature);
    if (relation) parts.push_back(*relation);
    return {encoder_(tape, ad::concat(std::span<const ad::Var>(parts)), state.h), state.future_feature, state.step + 1};
  }

  ad::Var classify_intent(ad::Tape& tape, const ad::Var& h) const { return intent_head_(tape, h); }
  ad::Var classify_action(ad::Tape& tape, const ad::Var& h) const { return action_head_(tape, h); }

  /// Decoder unroll from d_0 = h. u_1 is a learned start token; later inputs
  /// embed the previous predicted action distribution.
  FuturePrediction predict_future(ad::Tape& tape, const ad::Var& h, std::size_t horizon) const {
    using namespace ad;
    if (!cfg_.ablation.future) throw std::logic_error("predict_future: decoder disabled in this configuration");
    if (horizon < 1) throw std::invalid_argument("predict_future: horizon must be >= 1");
    FuturePrediction out;
    Var u = add(tape.constant(Tensor({h.rows(), cfg_.action_embed})), tape.param(*start_token_));
    Var d = h;
    for (std::size_t k = 0; k < horizon; ++k) {
      d = decoder_(tape, u, d);
      const Var logits = future_head_(tape, d);
      const Var dist = softmax_rows(logits);
      out.states.push_back(d);
      out.logits.push_back(logits);
      out.dists.push_back(dist);
      if (k + 1 < horizon) u = action_embed_(tape, dist);
    }
    out.future_feature = average(std::span<const Var>(out.states));
    return out;
  }

  /// Runs the online recurrence over a batch of equal-length samples.
  std::vector<StepVars> forward(ad::Tape& tape, std::span<const data::SequenceSample* const> batch,
                                const data::VisualFeatureProvider& features) const {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    const std::size_t length = batch.front()->length();
    if (length == 0) throw std::invalid_argument("forward: sample has no frames");
    for (const auto* s : batch)
      if (s->length() != length) throw std::invalid_argument("forward: samples in a batch must share a length");
    if (features.dim() != cfg_.visual_dim)
      throw std::invalid_argument("forward: feature provider dimensionality " + std::to_string(features.dim()) +
                                  " does not match configured " + std::to_string(cfg_.visual_dim));
    const std::size_t b = batch.size();
    EncoderState state = initial_state(tape, b);
    std::vector<StepVars> steps;
    steps.reserve(length);
    std::vector<const data::FrameAnnotation*> scenes(b);
    for (std::size_t t = 0; t < length; ++t) {
      ad::Tensor visual({b, cfg_.visual_dim});
      ad::Tensor boxes({b, 4});
      for (std::size_t i = 0; i < b; ++i) {
        const auto& f = batch[i]->frames[t];
        scenes[i] = &f;
        const auto v = features.lookup(batch[i]->track_id, f.frame_index);
        std::copy(v.begin(), v.end(), visual.data() + i * cfg_.visual_dim);
        const auto bx = box_input(f.box);
        std::copy(bx.begin(), bx.end(), boxes.data() + i * 4);
      }
      steps.push_back(frame_step(tape, scenes, std::move(visual), std::move(boxes), state));
    }
    return steps;
  }

  /// Value-level outputs for a single sample of any length >= 1.
  std::vector<StepOutput> predict(const data::SequenceSample& sample, const data::VisualFeatureProvider& features) const {
    ad::Tape tape;
    const data::SequenceSample* batch[] = {&sample};
    return to_outputs(forward(tape, batch, features), 0);
  }

  /// Recurrence values carried between frames during online inference.
  struct OnlineState {
    ad::Tensor h;
    ad::Tensor future_feature;
  };

  OnlineState online_state() const { return {ad::Tensor({1, cfg_.hidden}), ad::Tensor({1, cfg_.hidden})}; }

  /// Processes one frame on a fresh tape. Same arithmetic as forward().
  StepOutput step(const data::FrameAnnotation& frame, std::span<const float> visual, OnlineState& state) const {
    if (visual.size() != cfg_.visual_dim)
      throw std::invalid_argument("step: visual feature has " + std::to_string(visual.size()) + " values, expected " +
                                  std::to_string(cfg_.visual_dim));
    ad::Tape tape;
    EncoderState st{tape.constant(state.h), tape.constant(state.future_feature), 0};
    ad::Tensor v({1, cfg_.visual_dim});
    std::copy(visual.begin(), visual.end(), v.data());
    const auto bx = box_input(frame.box);
    ad::Tensor boxes({1, 4}, std::vector<double>(bx.begin(), bx.end()));
    std::vector<const data::FrameAnnotation*> scenes{&frame};
    const std::vector<StepVars> steps{frame_step(tape, scenes, std::move(v), std::move(boxes), st)};
    state.h = st.h.value();
    state.future_feature = st.future_feature.value();
    return to_outputs(steps, 0).front();
  }

  /// Extracts row `row` of every step as plain values.
  static std::vector<StepOutput> to_outputs(const std::vector<StepVars>& steps, std::size_t row) {
    std::vector<StepOutput> out;
    out.reserve(steps.size());
    for (const auto& s : steps) {
      StepOutput o;
      if (s.intent_logit.valid()) o.intent_score = data_sigmoid(s.intent_logit.value().at(row, 0));
      if (s.action_logits.valid()) o.action_dist = softmax_row(s.action_logits.value(), row);
      for (const auto& f : s.future_logits) o.future_dists.push_back(softmax_row(f.value(), row));
      if (row < s.attention.size()) o.attention = s.attention[row];
      o.hidden = s.hidden.value().row_values(row);
      out.push_back(std::move(o));
    }
    return out;
  }

  std::array<double, 4> box_input(const data::BoundingBox& b) const {
    if (!cfg_.relation.normalize_coordinates) return {b.x1, b.y1, b.x2, b.y2};
    const double w = cfg_.relation.image_width, h = cfg_.relation.image_height;
    return {b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h};
  }

 private:
  StepVars frame_step(ad::Tape& tape, const std::vector<const data::FrameAnnotation*>& scenes, ad::Tensor visual,
                      ad::Tensor boxes, EncoderState& state) const {
    StepVars sv;
    std::optional<ad::Var> rel;
    if (cfg_.ablation.relation) {
      auto r = relation_.forward(tape, scenes, state.h);
      rel = r.f_rel;
      sv.attention = std::move(r.attention);
    }
    state = encode_step(tape, tape.constant(std::move(visual)), tape.constant(std::move(boxes)), rel ? &*rel : nullptr,
                        state);
    sv.hidden = state.h;
    if (cfg_.ablation.intent) sv.intent_logit = classify_intent(tape, state.h);
    if (cfg_.ablation.action) sv.action_logits = classify_action(tape, state.h);
    if (cfg_.ablation.future) {
      auto fut = predict_future(tape, state.h, cfg_.horizon);
      sv.future_logits = std::move(fut.logits);
      state.future_feature = fut.future_feature;
    }
    sv.future_feature = state.future_feature;
    return sv;
  }

  static double data_sigmoid(double x) { return ad::detail::sigmoid(x); }

  static std::vector<double> softmax_row(const ad::Tensor& logits, std::size_t row) {
    std::vector<double> p = logits.row_values(row);
    const double m = *std::max_element(p.begin(), p.end());
    double z = 0.0;
    for (auto& v : p) z += (v = std::exp(v - m));
    for (auto& v : p) v /= z;
    return p;
  }

  ModelConfig cfg_;
  ad::ParameterStore params_;
  nn::Linear visual_, box_;
  relation::RelationNet relation_;
  nn::GruCell encoder_;
  nn::Linear intent_head_, action_head_;
  ad::Parameter* start_token_ = nullptr;
  nn::Linear action_embed_;
  nn::GruCell decoder_;
  nn::Linear future_head_;
};

}  // namespace crosswatch::model

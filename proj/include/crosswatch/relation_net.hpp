#pragma once

// Traffic-object relation features and soft-attention fusion.
//
// Each object type gets a raw feature vector relative to the target
// pedestrian, an FC embedding to width E, and (for the five multi-instance
// types) additive soft attention conditioned on the previous encoder hidden
// state. The ego vehicle is embedded directly. Absent types contribute an
// all-zero block of the concatenated relation feature.

#include "crosswatch/autodiff.hpp"
#include "crosswatch/data_model.hpp"
#include "crosswatch/layers.hpp"

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace crosswatch::relation {

using data::BoundingBox;
using data::ObjectType;

// Categorical codes fed to the embedding layers.
inline constexpr double code(data::LightType t) { return static_cast<double>(static_cast<int>(t)); }
inline constexpr double code(data::LightState s) { return static_cast<double>(static_cast<int>(s)); }
inline constexpr double code(data::SignType s) { return static_cast<double>(static_cast<int>(s)); }

inline std::array<double, 4> neighbor_feature(const BoundingBox& neighbor, const BoundingBox& target) {
  return {neighbor.x1 - target.x1, neighbor.y1 - target.y1, neighbor.x2 - target.x2, neighbor.y2 - target.y2};
}

inline std::array<double, 6> traffic_light_feature(const BoundingBox& light, data::LightType type,
                                                   data::LightState state, const BoundingBox& target) {
  return {light.center_x() - target.center_x(), light.center_y() - target.center_y(), light.width(), light.height(),
          code(type), code(state)};
}

inline std::array<double, 5> traffic_sign_feature(const BoundingBox& sign, data::SignType type,
                                                  const BoundingBox& target) {
  return {sign.center_x() - target.center_x(), sign.center_y() - target.center_y(), sign.width(), sign.height(),
          code(type)};
}

/// Offsets from the target's bottom center (x_bc, y_bc) = ((x1 + x2) / 2, y2)
/// followed by the raw crosswalk box. The third entry uses the box's y1.
inline std::array<double, 7> crosswalk_feature(const BoundingBox& crosswalk, const BoundingBox& target) {
  const double xbc = target.center_x();
  const double ybc = target.y2;
  return {crosswalk.x1 - xbc, crosswalk.x2 - xbc, crosswalk.y1 - ybc, crosswalk.x1, crosswalk.y1, crosswalk.x2,
          crosswalk.y2};
}

inline std::array<double, 7> station_feature(const BoundingBox& station, const BoundingBox& target) {
  return crosswalk_feature(station, target);
}

inline std::array<double, 4> ego_feature(const data::EgoRecord& ego) { return {ego.v, ego.a, ego.v_yaw, ego.a_yaw}; }

inline constexpr std::array<std::size_t, data::kObjectTypeCount> kRawWidth{4, 6, 5, 7, 7};
inline constexpr std::size_t kEgoWidth = 4;
inline constexpr std::size_t kBlockCount = data::kObjectTypeCount + 1;
inline constexpr std::array<const char*, kBlockCount> kBlockNames{"ne", "tl", "ts", "cw", "st", "eg"};

struct RelationConfig {
  std::size_t embed = 32;
  std::size_t attention_hidden = 64;
  bool normalize_coordinates = false;
  double image_width = 1920.0;
  double image_height = 1080.0;
};

/// Raw feature of one object relative to the target, optionally with pixel
/// quantities divided by the image size. Categorical codes are not scaled.
inline std::vector<double> raw_feature(const data::TrafficObjectRecord& obj, const BoundingBox& target,
                                       const RelationConfig& cfg) {
  std::vector<double> f;
  // per-entry axis: 0 = x, 1 = y, 2 = categorical
  std::vector<int> axis;
  switch (obj.object_type) {
    case ObjectType::neighbor: {
      auto a = neighbor_feature(obj.box, target);
      f.assign(a.begin(), a.end());
      axis = {0, 1, 0, 1};
      break;
    }
    case ObjectType::traffic_light: {
      auto a = traffic_light_feature(obj.box, obj.light_type.value(), obj.light_state.value(), target);
      f.assign(a.begin(), a.end());
      axis = {0, 1, 0, 1, 2, 2};
      break;
    }
    case ObjectType::traffic_sign: {
      auto a = traffic_sign_feature(obj.box, obj.sign_type.value(), target);
      f.assign(a.begin(), a.end());
      axis = {0, 1, 0, 1, 2};
      break;
    }
    case ObjectType::crosswalk:
    case ObjectType::station: {
      auto a = crosswalk_feature(obj.box, target);
      f.assign(a.begin(), a.end());
      axis = {0, 0, 1, 0, 1, 0, 1};
      break;
    }
  }
  if (cfg.normalize_coordinates)
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (axis[i] == 0) f[i] /= cfg.image_width;
      if (axis[i] == 1) f[i] /= cfg.image_height;
    }
  return f;
}

/// Attention weights of one object type for one scene; `instance` is the
/// object's position in the frame's object list.
struct TypeAttention {
  ObjectType type = ObjectType::neighbor;
  std::vector<std::pair<std::size_t, double>> weights;
};

/// Value-level relation feature of a single scene.
struct RelationFeature {
  std::array<std::vector<double>, kBlockCount> blocks;  // f_ne, f_tl, f_ts, f_cw, f_st, f_eg
  std::vector<double> f_rel;
  std::vector<TypeAttention> attention;  // present types only
};

class RelationNet {
 public:
  struct Output {
    ad::Var f_rel;                                    // [B, 6E]
    std::array<ad::Var, kBlockCount> blocks;          // each [B, E]
    std::vector<std::vector<TypeAttention>> attention;  // per batch row
  };

  RelationNet() = default;
  RelationNet(ad::ParameterStore& store, const RelationConfig& cfg, std::size_t hidden, std::uint64_t seed)
      : cfg_(cfg) {
    for (std::size_t k = 0; k < data::kObjectTypeCount; ++k) {
      const std::string p = std::string("rel.") + kBlockNames[k];
      TypeParams tp;
      tp.embed = nn::Linear::create(store, p + ".embed", kRawWidth[k], cfg.embed, seed);
      tp.w_f = &store.add(p + ".att.w_f", nn::uniform_init({cfg.embed, cfg.attention_hidden}, cfg.embed, seed, p + ".att.w_f"));
      tp.w_h = &store.add(p + ".att.w_h", nn::uniform_init({hidden, cfg.attention_hidden}, hidden, seed, p + ".att.w_h"));
      tp.b = &store.add(p + ".att.b", ad::Tensor({1, cfg.attention_hidden}));
      tp.w = &store.add(p + ".att.w", nn::uniform_init({cfg.attention_hidden, 1}, cfg.attention_hidden, seed, p + ".att.w"));
      types_[k] = tp;
    }
    ego_ = nn::Linear::create(store, "rel.eg.embed", kEgoWidth, cfg.embed, seed);
  }

  const RelationConfig& config() const { return cfg_; }
  std::size_t width() const { return kBlockCount * cfg_.embed; }

  /// Embeds raw feature rows of one type: tanh(FC(raw)).
  ad::Var embed(ad::Tape& tape, ObjectType type, const ad::Var& raw) const {
    return ad::tanh(types_[index(type)].embed(tape, raw));
  }

  /// Additive soft attention over `embedded` rows grouped by `segment`
  /// (one segment per row of `h_prev`). Returns the fused [segments, E]
  /// matrix and the weight column.
  std::pair<ad::Var, ad::Var> attend(ad::Tape& tape, ObjectType type, const ad::Var& embedded,
                                     const std::vector<std::size_t>& segment, const ad::Var& h_prev) const {
    using namespace ad;
    if (embedded.rows() == 0) throw std::invalid_argument("soft_attend: no instances; use the zero block instead");
    const TypeParams& tp = types_[index(type)];
    const Var from_h = gather_rows(matmul(h_prev, tape.param(*tp.w_h)), segment);
    const Var pre = add(add(matmul(embedded, tape.param(*tp.w_f)), from_h), tape.param(*tp.b));
    const Var scores = matmul(ad::tanh(pre), tape.param(*tp.w));
    const Var weights = segment_softmax(scores, segment, h_prev.rows());
    return {segment_weighted_sum(weights, embedded, segment, h_prev.rows()), weights};
  }

  /// Builds f_rel for a batch of scenes; each scene's own box is the target
  /// pedestrian and `h_prev` holds the encoder state before this frame.
  Output forward(ad::Tape& tape, std::span<const data::FrameAnnotation* const> scenes, const ad::Var& h_prev) const {
    using namespace ad;
    const std::size_t batch = scenes.size();
    if (h_prev.rows() != batch) throw ShapeError("relation: h_prev rows " + std::to_string(h_prev.rows()) +
                                                 " vs " + std::to_string(batch) + " scenes");
    Output out;
    out.attention.resize(batch);
    for (std::size_t k = 0; k < data::kObjectTypeCount; ++k) {
      const auto type = static_cast<ObjectType>(k);
      std::vector<double> raw;
      std::vector<std::size_t> segment, instance;
      for (std::size_t b = 0; b < batch; ++b) {
        const auto& objs = scenes[b]->objects;
        for (std::size_t i = 0; i < objs.size(); ++i) {
          if (objs[i].object_type != type) continue;
          const auto f = raw_feature(objs[i], scenes[b]->box, cfg_);
          raw.insert(raw.end(), f.begin(), f.end());
          segment.push_back(b);
          instance.push_back(i);
        }
      }
      if (segment.empty()) {
        out.blocks[k] = tape.constant(Tensor({batch, cfg_.embed}));
        continue;
      }
      const Var emb = embed(tape, type, tape.constant(Tensor({segment.size(), kRawWidth[k]}, std::move(raw))));
      auto [fused, weights] = attend(tape, type, emb, segment, h_prev);
      out.blocks[k] = fused;
      const Tensor& w = weights.value();
      for (std::size_t n = 0; n < segment.size(); ++n) {
        auto& per_scene = out.attention[segment[n]];
        if (per_scene.empty() || per_scene.back().type != type) per_scene.push_back(TypeAttention{type, {}});
        per_scene.back().weights.emplace_back(instance[n], w[n]);
      }
    }
    std::vector<double> ego;
    ego.reserve(batch * kEgoWidth);
    for (const auto* s : scenes) {
      const auto e = ego_feature(s->ego);
      ego.insert(ego.end(), e.begin(), e.end());
    }
    out.blocks[data::kObjectTypeCount] = ad::tanh(ego_(tape, tape.constant(Tensor({batch, kEgoWidth}, std::move(ego)))));
    out.f_rel = concat(std::span<const Var>(out.blocks));
    return out;
  }

  /// Single-scene convenience returning plain values.
  RelationFeature build(const data::FrameAnnotation& scene, const std::vector<double>& h_prev) const {
    ad::Tape tape;
    const data::FrameAnnotation* scenes[] = {&scene};
    const auto h = tape.constant(ad::Tensor::row(h_prev));
    const Output o = forward(tape, scenes, h);
    RelationFeature rf;
    for (std::size_t k = 0; k < kBlockCount; ++k) rf.blocks[k] = o.blocks[k].value().row_values(0);
    rf.f_rel = o.f_rel.value().row_values(0);
    rf.attention = o.attention.front();
    return rf;
  }

 private:
  struct TypeParams {
    nn::Linear embed;
    ad::Parameter* w_f = nullptr;
    ad::Parameter* w_h = nullptr;
    ad::Parameter* b = nullptr;
    ad::Parameter* w = nullptr;
  };

  static std::size_t index(ObjectType t) { return static_cast<std::size_t>(t); }

  RelationConfig cfg_;
  std::array<TypeParams, data::kObjectTypeCount> types_{};
  nn::Linear ego_;
};

}  // namespace crosswatch::relation

#pragma once

// Scripted synthetic scenes standing in for annotated driving video.
//
// Crossers: waiting -> going towards -> crossing -> crossed (walking or
// standing), intent 1 throughout, with a crosswalk and a pedestrian light
// ahead. Bystanders alternate standing and walking along the curb, intent 0,
// and sometimes see distractor objects placed away from them.
//
// Visual features: mu[action] + appearance[track] + N(0, sigma^2 I). Class
// means are built on a seeded orthonormal basis:
//   standing        a*e0             other walking    a*e2
//   waiting         a*e0 + b*e1      going towards    a*e2 + b*e1
//   crossing        a*e3
//   crossed (stand) a*e0 + c*e4      crossed (walk)   a*e2 + c*e4
// so intent in the pre-crossing phase only shifts the mean by b.

#include "crosswatch/data_model.hpp"
#include "crosswatch/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace crosswatch::synthetic {

struct SplitCounts {
  std::size_t crossers = 0;
  std::size_t bystanders = 0;
  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

struct GeneratorConfig {
  SplitCounts train{100, 100};
  SplitCounts val{20, 20};
  SplitCounts test{20, 20};
  std::size_t frames_per_track = 120;
  std::size_t feature_dim = 64;
  double noise_sigma = 1.0;
  double appearance_sigma = 1.5;
  double base_separation = 3.0;    // a
  double intent_separation = 2.0;  // b
  double phase_separation = 2.0;   // c
  std::uint64_t class_mean_seed = 17;
  std::size_t max_neighbors = 3;
  double station_prob = 0.4;
  double distractor_crosswalk_prob = 0.3;
  double distractor_light_prob = 0.4;
  double fps = 30.0;
  double image_width = 1920.0;
  double image_height = 1080.0;

  void validate() const {
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("generator: noise_sigma must be >= 0");
    if (!(appearance_sigma >= 0.0) || !std::isfinite(appearance_sigma))
      throw std::invalid_argument("generator: appearance_sigma must be >= 0");
    if (feature_dim < 5) throw std::invalid_argument("generator: feature_dim must be >= 5 (one axis per mean component)");
    if (frames_per_track < 60) throw std::invalid_argument("generator: frames_per_track must be >= 60");
    if (!(fps > 0.0)) throw std::invalid_argument("generator: fps must be positive");
    if (!(image_width >= 400.0 && image_height >= 300.0)) throw std::invalid_argument("generator: image is too small");
    for (double p : {station_prob, distractor_crosswalk_prob, distractor_light_prob})
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("generator: probabilities must lie in [0, 1]");
    for (double s : {base_separation, intent_separation, phase_separation})
      if (!std::isfinite(s)) throw std::invalid_argument("generator: separations must be finite");
    const std::size_t total = train.crossers + train.bystanders + val.crossers + val.bystanders + test.crossers + test.bystanders;
    if (total == 0) throw std::invalid_argument("generator: no tracks requested");
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

inline nlohmann::ordered_json to_json(const GeneratorConfig& c) {
  auto counts = [](const SplitCounts& s) { return nlohmann::ordered_json{{"crossers", s.crossers}, {"bystanders", s.bystanders}}; };
  return {{"splits", {{"train", counts(c.train)}, {"val", counts(c.val)}, {"test", counts(c.test)}}},
          {"frames_per_track", c.frames_per_track},
          {"feature_dim", c.feature_dim},
          {"noise_sigma", c.noise_sigma},
          {"appearance_sigma", c.appearance_sigma},
          {"base_separation", c.base_separation},
          {"intent_separation", c.intent_separation},
          {"phase_separation", c.phase_separation},
          {"class_mean_seed", c.class_mean_seed},
          {"max_neighbors", c.max_neighbors},
          {"station_prob", c.station_prob},
          {"distractor_crosswalk_prob", c.distractor_crosswalk_prob},
          {"distractor_light_prob", c.distractor_light_prob},
          {"fps", c.fps},
          {"image_width", c.image_width},
          {"image_height", c.image_height}};
}

/// Keys are optional and override the defaults; unknown keys are rejected.
inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("generator config: expected a JSON object");
  static const std::set<std::string> known{"splits", "frames_per_track", "feature_dim", "noise_sigma", "appearance_sigma",
                                           "base_separation", "intent_separation", "phase_separation", "class_mean_seed",
                                           "max_neighbors", "station_prob", "distractor_crosswalk_prob",
                                           "distractor_light_prob", "fps", "image_width", "image_height"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("generator config: unknown key '" + k + "'");
  GeneratorConfig c;
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("splits")) {
      const auto& s = j["splits"];
      if (!s.is_object()) throw std::invalid_argument("generator config: 'splits' must be an object");
      for (const auto& [name, v] : s.items()) {
        SplitCounts* target = name == "train" ? &c.train : name == "val" ? &c.val : name == "test" ? &c.test : nullptr;
        if (!target) throw std::invalid_argument("generator config: unknown split '" + name + "'");
        for (const auto& [k, x] : v.items())
          if (k != "crossers" && k != "bystanders")
            throw std::invalid_argument("generator config: unknown key '" + k + "' in split '" + name + "'");
        if (v.contains("crossers")) target->crossers = v["crossers"].get<std::size_t>();
        if (v.contains("bystanders")) target->bystanders = v["bystanders"].get<std::size_t>();
      }
    }
    read("frames_per_track", c.frames_per_track);
    read("feature_dim", c.feature_dim);
    read("noise_sigma", c.noise_sigma);
    read("appearance_sigma", c.appearance_sigma);
    read("base_separation", c.base_separation);
    read("intent_separation", c.intent_separation);
    read("phase_separation", c.phase_separation);
    read("class_mean_seed", c.class_mean_seed);
    read("max_neighbors", c.max_neighbors);
    read("station_prob", c.station_prob);
    read("distractor_crosswalk_prob", c.distractor_crosswalk_prob);
    read("distractor_light_prob", c.distractor_light_prob);
    read("fps", c.fps);
    read("image_width", c.image_width);
    read("image_height", c.image_height);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Per-action feature means (kActionCount x D).
inline std::vector<std::vector<double>> class_means(const GeneratorConfig& cfg) {
  const std::size_t D = cfg.feature_dim;
  std::mt19937_64 rng(cfg.class_mean_seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  // Gram-Schmidt on five Gaussian vectors
  std::vector<std::vector<double>> e;
  while (e.size() < 5) {
    std::vector<double> v(D);
    for (auto& x : v) x = n01(rng);
    for (const auto& u : e) {
      double dot = 0;
      for (std::size_t i = 0; i < D; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < D; ++i) v[i] -= dot * u[i];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    e.push_back(std::move(v));
  }
  const double a = cfg.base_separation, b = cfg.intent_separation, c = cfg.phase_separation;
  auto combo = [&](std::initializer_list<std::pair<std::size_t, double>> terms) {
    std::vector<double> v(D, 0.0);
    for (auto [k, w] : terms)
      for (std::size_t i = 0; i < D; ++i) v[i] += w * e[k][i];
    return v;
  };
  using data::SemanticAction;
  std::vector<std::vector<double>> mu(data::kActionCount);
  mu[static_cast<std::size_t>(SemanticAction::standing)] = combo({{0, a}});
  mu[static_cast<std::size_t>(SemanticAction::waiting)] = combo({{0, a}, {1, b}});
  mu[static_cast<std::size_t>(SemanticAction::going_towards)] = combo({{2, a}, {1, b}});
  mu[static_cast<std::size_t>(SemanticAction::crossing)] = combo({{3, a}});
  mu[static_cast<std::size_t>(SemanticAction::crossed_and_standing)] = combo({{0, a}, {4, c}});
  mu[static_cast<std::size_t>(SemanticAction::crossed_and_walking)] = combo({{2, a}, {4, c}});
  mu[static_cast<std::size_t>(SemanticAction::other_walking)] = combo({{2, a}});
  return mu;
}

namespace detail {

using data::BaseAction;
using data::BoundingBox;
using data::CrossingPhase;
using data::ObjectType;
using data::TrafficObjectRecord;

struct TrackPlan {
  std::string id;
  data::Split split;
  bool crosser;
  std::uint64_t seed;
};

struct StaticObject {
  TrafficObjectRecord record;
  // general lights cycle; pedestrian lights follow the crosser's phase
  bool cycling = false;
  int cycle_offset = 0;
};

struct GeneratedTrack {
  data::Track track;
  std::vector<std::vector<float>> features;
};

inline BoundingBox clip(BoundingBox b, double w, double h) {
  b.x1 = std::clamp(b.x1, 0.0, w);
  b.x2 = std::clamp(b.x2, 0.0, w);
  b.y1 = std::clamp(b.y1, 0.0, h);
  b.y2 = std::clamp(b.y2, 0.0, h);
  return b;
}

inline data::LightState cycle_state(int t) {
  const int p = ((t % 88) + 88) % 88;
  if (p < 40) return data::LightState::green;
  if (p < 48) return data::LightState::yellow;
  return data::LightState::red;
}

inline GeneratedTrack generate_track(const GeneratorConfig& cfg, const std::vector<std::vector<double>>& mu,
                                     const TrackPlan& plan) {
  std::mt19937_64 rng(plan.seed);
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto I = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto chance = [&](double p) { return std::bernoulli_distribution(p)(rng); };
  std::normal_distribution<double> n01(0.0, 1.0);

  const int F = static_cast<int>(cfg.frames_per_track);
  const double W = cfg.image_width, H = cfg.image_height;
  const double h = U(100.0, 250.0);    // pedestrian height (px)
  const double half_w = 0.2 * h;
  const double y_base = U(0.55 * H, 0.9 * H);
  const double dir = chance(0.5) ? 1.0 : -1.0;

  std::vector<double> xs(F);
  std::vector<BaseAction> base(F);
  std::vector<CrossingPhase> phase(F, CrossingPhase::pre);
  std::vector<StaticObject> objects;

  // event timing for crossers
  int event = F, cross_end = F, go_start = F;
  double cw_x1 = 0, cw_x2 = 0;
  if (plan.crosser) {
    event = std::min(F - 12, static_cast<int>(std::lround(0.74 * F)) + I(0, 7));
    const int cross_len = I(12, 18);
    cross_end = std::min(F, event + cross_len);
    go_start = event - I(10, 30);
    const double gap = U(30.0, 100.0);
    const double width = U(300.0, 550.0);
    const double path = gap + width;
    const double lo = half_w + 10.0, hi = W - half_w - 10.0 - path;
    double x0 = U(lo, std::max(lo, hi));
    if (dir < 0) x0 = W - x0;
    const double v_go = gap / static_cast<double>(event - go_start);
    const double v_cross = width / static_cast<double>(cross_len);
    const bool walk_after = chance(0.7);
    const double v_after = U(1.0, 3.0) * h / 200.0;
    double x = x0;
    for (int t = 0; t < F; ++t) {
      if (t < go_start) {
        base[t] = BaseAction::standing;
      } else if (t < event) {
        base[t] = BaseAction::walking;
        x += dir * v_go;
      } else if (t < cross_end) {
        base[t] = BaseAction::walking;
        phase[t] = CrossingPhase::crossing;
        x += dir * v_cross;
      } else {
        base[t] = walk_after ? BaseAction::walking : BaseAction::standing;
        phase[t] = CrossingPhase::crossed;
        if (walk_after) x += dir * v_after;
      }
      xs[t] = std::clamp(x, half_w, W - half_w);
    }
    const double cw_start = x0 + dir * gap;
    cw_x1 = std::min(cw_start, cw_start + dir * width);
    cw_x2 = std::max(cw_start, cw_start + dir * width);
    const double cw_y1 = y_base - U(5.0, 20.0);
    StaticObject cw;
    cw.record.object_type = ObjectType::crosswalk;
    cw.record.box = clip({cw_x1, cw_y1, cw_x2, cw_y1 + U(40.0, 90.0)}, W, H);
    objects.push_back(cw);
    StaticObject light;
    light.record.object_type = ObjectType::traffic_light;
    light.record.light_type = data::LightType::pedestrian;
    light.record.light_state = data::LightState::red;
    const double lx = dir > 0 ? cw_x2 + U(0.0, 60.0) : cw_x1 - U(0.0, 60.0);
    const double ly = y_base - h - U(40.0, 160.0);
    light.record.box = clip({lx - 12.0, ly, lx + 12.0, ly + 40.0}, W, H);
    objects.push_back(light);
    if (chance(0.5)) {
      StaticObject sign;
      sign.record.object_type = ObjectType::traffic_sign;
      sign.record.sign_type = data::SignType::crosswalk;
      const double sx = dir > 0 ? cw_x1 - U(0.0, 40.0) : cw_x2 + U(0.0, 40.0);
      const double sy = y_base - h - U(0.0, 80.0);
      sign.record.box = clip({sx - 18.0, sy, sx + 18.0, sy + 36.0}, W, H);
      objects.push_back(sign);
    }
  } else {
    double x = U(half_w + 10.0, W - half_w - 10.0);
    int t = 0;
    bool walking = chance(0.5);
    while (t < F) {
      const int len = I(15, 45);
      const double v = walking ? (chance(0.5) ? 1.0 : -1.0) * U(1.0, 3.0) * h / 200.0 : 0.0;
      for (int k = 0; k < len && t < F; ++k, ++t) {
        base[t] = walking ? BaseAction::walking : BaseAction::standing;
        x += v;
        x = std::clamp(x, half_w, W - half_w);
        xs[t] = x;
      }
      walking = !walking;
    }
    // distractors are placed away from the pedestrian
    const double x_mid = xs[F / 2];
    auto far_x = [&](double span) {
      const double off = U(500.0, 900.0);
      const double cx = (x_mid + off + span < W) ? x_mid + off : x_mid - off - span;
      return std::clamp(cx, 0.0, std::max(0.0, W - span));
    };
    if (chance(cfg.distractor_crosswalk_prob)) {
      const double width = U(300.0, 550.0);
      const double x1 = far_x(width);
      const double y1 = U(0.45 * H, 0.6 * H);
      StaticObject cw;
      cw.record.object_type = ObjectType::crosswalk;
      cw.record.box = clip({x1, y1, x1 + width, y1 + U(20.0, 50.0)}, W, H);
      objects.push_back(cw);
    }
    if (chance(cfg.distractor_light_prob)) {
      StaticObject light;
      light.record.object_type = ObjectType::traffic_light;
      light.record.light_type = chance(0.8) ? data::LightType::general : data::LightType::pedestrian;
      light.record.light_state = data::LightState::green;
      light.cycling = true;
      light.cycle_offset = I(0, 87);
      const double lx = far_x(24.0);
      const double ly = U(0.1 * H, 0.4 * H);
      light.record.box = clip({lx, ly, lx + 24.0, ly + 40.0}, W, H);
      objects.push_back(light);
    }
    if (chance(0.4)) {
      StaticObject sign;
      sign.record.object_type = ObjectType::traffic_sign;
      static constexpr std::array<data::SignType, 4> kinds{data::SignType::stop, data::SignType::yield,
                                                           data::SignType::speed, data::SignType::other};
      sign.record.sign_type = kinds[static_cast<std::size_t>(I(0, 3))];
      const double sx = U(0.0, W - 36.0);
      const double sy = U(0.2 * H, 0.5 * H);
      sign.record.box = clip({sx, sy, sx + 36.0, sy + 36.0}, W, H);
      objects.push_back(sign);
    }
    if (chance(cfg.station_prob)) {
      StaticObject st;
      st.record.object_type = ObjectType::station;
      const double sx = std::clamp(x_mid + U(-150.0, 150.0), 0.0, W - 200.0);
      const double sy = y_base - h - U(0.0, 60.0);
      st.record.box = clip({sx, sy, sx + U(120.0, 200.0), sy + U(60.0, 120.0)}, W, H);
      objects.push_back(st);
    }
  }
  if (plan.crosser && chance(0.1)) {
    StaticObject st;
    st.record.object_type = ObjectType::station;
    const double sx = U(0.0, W - 200.0);
    const double sy = U(0.3 * H, 0.5 * H);
    st.record.box = clip({sx, sy, sx + 150.0, sy + 80.0}, W, H);
    objects.push_back(st);
  }

  // neighbors move linearly
  struct Neighbor {
    double x, y, vx, hgt;
  };
  std::vector<Neighbor> neighbors;
  const int n_neighbors = I(0, static_cast<int>(cfg.max_neighbors));
  for (int k = 0; k < n_neighbors; ++k)
    neighbors.push_back({U(50.0, W - 50.0), U(0.5 * H, 0.9 * H), U(-2.5, 2.5), U(90.0, 240.0)});

  // appearance offset and ego profile
  std::vector<double> appearance(cfg.feature_dim);
  for (auto& v : appearance) v = cfg.appearance_sigma * n01(rng);
  double v_ego = U(0.0, 12.0), a_ego = 0.0, yaw = 0.0;

  GeneratedTrack out;
  out.track.track_id = plan.id;
  out.track.split = plan.split;
  const double dt = 1.0 / cfg.fps;
  for (int t = 0; t < F; ++t) {
    data::FrameAnnotation f;
    f.frame_index = t;
    const double jitter = base[t] == BaseAction::standing ? 0.3 : 1.0;
    const double x = xs[t] + jitter * n01(rng);
    const double yb = y_base + 0.5 * jitter * n01(rng);
    f.box = clip({x - half_w, yb - h, x + half_w, yb}, W, H);
    f.base_action = base[t];
    f.intent = plan.crosser ? 1 : 0;
    f.crossing_phase = phase[t];
    f.semantic_action = data::augment_actions(f.base_action, f.intent, f.crossing_phase);
    for (const auto& o : objects) {
      TrafficObjectRecord r = o.record;
      if (r.object_type == ObjectType::traffic_light) {
        if (o.cycling) r.light_state = cycle_state(t + o.cycle_offset);
        else r.light_state = (t >= go_start && t < cross_end) ? data::LightState::green : data::LightState::red;
      }
      f.objects.push_back(r);
    }
    for (auto& nb : neighbors) {
      nb.x = std::clamp(nb.x + nb.vx, 20.0, W - 20.0);
      const double hw = 0.2 * nb.hgt;
      f.objects.push_back({ObjectType::neighbor, clip({nb.x - hw, nb.y - nb.hgt, nb.x + hw, nb.y}, W, H), {}, {}, {}});
    }
    const double a_new = 0.9 * a_ego + 0.15 * n01(rng);
    const double yaw_new = 0.95 * yaw + 0.01 * n01(rng);
    v_ego = std::max(0.0, v_ego + a_new * dt);
    f.ego = {v_ego, a_new, yaw_new, (yaw_new - yaw) / dt};
    a_ego = a_new;
    yaw = yaw_new;
    f.visual_feature_key = data::feature_key(plan.id, t);

    const auto& m = mu[static_cast<std::size_t>(f.semantic_action)];
    std::vector<float> feat(cfg.feature_dim);
    for (std::size_t i = 0; i < cfg.feature_dim; ++i)
      feat[i] = static_cast<float>(m[i] + appearance[i] + cfg.noise_sigma * n01(rng));
    out.features.push_back(std::move(feat));
    out.track.frames.push_back(std::move(f));
  }
  return out;
}

}  // namespace detail

struct SyntheticData {
  data::Dataset dataset;
  data::FeatureStore features;
};

/// Tracks are generated independently from seeds derived from (seed, track
/// index), so the output does not depend on the worker count.
inline SyntheticData generate(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto mu = class_means(cfg);
  std::vector<detail::TrackPlan> plans;
  auto plan_split = [&](data::Split split, const SplitCounts& counts) {
    const std::string prefix(data::to_string(split));
    char buf[32];
    for (std::size_t i = 0; i < counts.crossers; ++i) {
      std::snprintf(buf, sizeof buf, "_c%04zu", i);
      plans.push_back({prefix + buf, split, true, data::mix_seed(seed, plans.size())});
    }
    for (std::size_t i = 0; i < counts.bystanders; ++i) {
      std::snprintf(buf, sizeof buf, "_b%04zu", i);
      plans.push_back({prefix + buf, split, false, data::mix_seed(seed, plans.size())});
    }
  };
  plan_split(data::Split::train, cfg.train);
  plan_split(data::Split::val, cfg.val);
  plan_split(data::Split::test, cfg.test);

  std::vector<detail::GeneratedTrack> generated(plans.size());
  parallel_for(plans.size(), [&](std::size_t i) { generated[i] = detail::generate_track(cfg, mu, plans[i]); });

  SyntheticData out{data::Dataset{cfg.fps, {}}, data::FeatureStore(cfg.feature_dim)};
  for (auto& g : generated) {
    for (std::size_t t = 0; t < g.features.size(); ++t)
      out.features.insert(g.track.frames[t].visual_feature_key, std::move(g.features[t]));
    out.dataset.tracks.push_back(std::move(g.track));
  }
  return out;
}

}  // namespace crosswatch::synthetic

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace crosswatch::data {

enum class BaseAction { standing, walking };
enum class CrossingPhase { pre, crossing, crossed };
enum class SemanticAction {
  standing = 0,
  waiting,
  going_towards,
  crossing,
  crossed_and_standing,
  crossed_and_walking,
  other_walking,
};
inline constexpr std::size_t kActionCount = 7;

enum class ObjectType { neighbor, traffic_light, traffic_sign, crosswalk, station };
inline constexpr std::size_t kObjectTypeCount = 5;

enum class LightType { general = 0, pedestrian = 1 };
enum class LightState { green = 0, yellow = 1, red = 2 };
enum class SignType { stop = 0, crosswalk = 1, yield = 2, speed = 3, other = 4 };
enum class Split { train, val, test };

// Lower-snake-case names, used by every serialized format.
template <class E>
struct EnumNames;

template <>
struct EnumNames<BaseAction> {
  static constexpr std::array<std::pair<BaseAction, std::string_view>, 2> table{
      {{BaseAction::standing, "standing"}, {BaseAction::walking, "walking"}}};
};
template <>
struct EnumNames<CrossingPhase> {
  static constexpr std::array<std::pair<CrossingPhase, std::string_view>, 3> table{
      {{CrossingPhase::pre, "pre"}, {CrossingPhase::crossing, "crossing"}, {CrossingPhase::crossed, "crossed"}}};
};
template <>
struct EnumNames<SemanticAction> {
  static constexpr std::array<std::pair<SemanticAction, std::string_view>, 7> table{
      {{SemanticAction::standing, "standing"},
       {SemanticAction::waiting, "waiting"},
       {SemanticAction::going_towards, "going_towards"},
       {SemanticAction::crossing, "crossing"},
       {SemanticAction::crossed_and_standing, "crossed_and_standing"},
       {SemanticAction::crossed_and_walking, "crossed_and_walking"},
       {SemanticAction::other_walking, "other_walking"}}};
};
template <>
struct EnumNames<ObjectType> {
  static constexpr std::array<std::pair<ObjectType, std::string_view>, 5> table{
      {{ObjectType::neighbor, "neighbor"},
       {ObjectType::traffic_light, "traffic_light"},
       {ObjectType::traffic_sign, "traffic_sign"},
       {ObjectType::crosswalk, "crosswalk"},
       {ObjectType::station, "station"}}};
};
template <>
struct EnumNames<LightType> {
  static constexpr std::array<std::pair<LightType, std::string_view>, 2> table{
      {{LightType::general, "general"}, {LightType::pedestrian, "pedestrian"}}};
};
template <>
struct EnumNames<LightState> {
  static constexpr std::array<std::pair<LightState, std::string_view>, 3> table{
      {{LightState::green, "green"}, {LightState::yellow, "yellow"}, {LightState::red, "red"}}};
};
template <>
struct EnumNames<SignType> {
  static constexpr std::array<std::pair<SignType, std::string_view>, 5> table{
      {{SignType::stop, "stop"},
       {SignType::crosswalk, "crosswalk"},
       {SignType::yield, "yield"},
       {SignType::speed, "speed"},
       {SignType::other, "other"}}};
};
template <>
struct EnumNames<Split> {
  static constexpr std::array<std::pair<Split, std::string_view>, 3> table{
      {{Split::train, "train"}, {Split::val, "val"}, {Split::test, "test"}}};
};

template <class E>
std::string_view to_string(E value) {
  for (const auto& [e, name] : EnumNames<E>::table)
    if (e == value) return name;
  throw std::invalid_argument("enum value out of range");
}

template <class E>
std::optional<E> parse_enum(std::string_view name) {
  for (const auto& [e, n] : EnumNames<E>::table)
    if (n == name) return e;
  return std::nullopt;
}

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const { return x1 <= x2 && y1 <= y2 && std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2); }
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  BoundingBox translated(double dx, double dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct TrafficObjectRecord {
  ObjectType object_type = ObjectType::neighbor;
  BoundingBox box;
  std::optional<LightType> light_type;    // traffic lights only
  std::optional<LightState> light_state;  // traffic lights only
  std::optional<SignType> sign_type;      // traffic signs only

  /// Empty when the categorical fields match the object type.
  std::optional<std::string> validate() const {
    if (!box.valid()) return "invalid box (requires x1 <= x2 and y1 <= y2)";
    const bool light = object_type == ObjectType::traffic_light;
    const bool sign = object_type == ObjectType::traffic_sign;
    if (light != light_type.has_value()) return "light_type must be present iff object_type is traffic_light";
    if (light != light_state.has_value()) return "light_state must be present iff object_type is traffic_light";
    if (sign != sign_type.has_value()) return "sign_type must be present iff object_type is traffic_sign";
    return std::nullopt;
  }

  friend bool operator==(const TrafficObjectRecord&, const TrafficObjectRecord&) = default;
};

struct EgoRecord {
  double v = 0;      // m/s
  double a = 0;      // m/s^2
  double v_yaw = 0;  // rad/s
  double a_yaw = 0;  // rad/s^2

  bool valid() const { return std::isfinite(v) && std::isfinite(a) && std::isfinite(v_yaw) && std::isfinite(a_yaw); }
  friend bool operator==(const EgoRecord&, const EgoRecord&) = default;
};

struct FrameAnnotation {
  int frame_index = 0;
  BoundingBox box;
  BaseAction base_action = BaseAction::standing;
  int intent = 0;
  CrossingPhase crossing_phase = CrossingPhase::pre;
  SemanticAction semantic_action = SemanticAction::standing;
  std::vector<TrafficObjectRecord> objects;
  EgoRecord ego;
  std::string visual_feature_key;

  friend bool operator==(const FrameAnnotation&, const FrameAnnotation&) = default;
};

struct Track {
  std::string track_id;
  Split split = Split::train;
  std::vector<FrameAnnotation> frames;

  friend bool operator==(const Track&, const Track&) = default;
};

struct Dataset {
  double fps = 30.0;
  std::vector<Track> tracks;

  std::vector<const Track*> split(Split s) const {
    std::vector<const Track*> out;
    for (const auto& t : tracks)
      if (t.split == s) out.push_back(&t);
    return out;
  }

  const Track* find(std::string_view id) const {
    for (const auto& t : tracks)
      if (t.track_id == id) return &t;
    return nullptr;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// A fixed-length window cut from one track.
struct SequenceSample {
  std::string track_id;
  Split split = Split::train;
  std::vector<FrameAnnotation> frames;

  std::size_t length() const { return frames.size(); }
  int final_intent() const { return frames.empty() ? 0 : frames.back().intent; }
};

inline SequenceSample whole_track(const Track& t) { return {t.track_id, t.split, t.frames}; }

inline std::string feature_key(std::string_view track_id, int frame_index) {
  return std::string(track_id) + "/" + std::to_string(frame_index);
}

/// Maps the binary base action, intent and crossing phase onto the seven
/// semantic action classes.
inline constexpr SemanticAction augment_actions(BaseAction base, int intent, CrossingPhase phase) {
  switch (phase) {
    case CrossingPhase::crossing:
      return SemanticAction::crossing;
    case CrossingPhase::crossed:
      return base == BaseAction::standing ? SemanticAction::crossed_and_standing : SemanticAction::crossed_and_walking;
    case CrossingPhase::pre:
      break;
  }
  if (base == BaseAction::standing) return intent ? SemanticAction::waiting : SemanticAction::standing;
  return intent ? SemanticAction::going_towards : SemanticAction::other_walking;
}

// ---------------------------------------------------------------------------
// sampling protocols

struct SampledWindows {
  std::vector<SequenceSample> samples;
  std::size_t skipped_tracks = 0;
};

inline SequenceSample cut_window(const Track& t, std::size_t start, std::size_t length) {
  SequenceSample s{t.track_id, t.split, {}};
  s.frames.assign(t.frames.begin() + static_cast<std::ptrdiff_t>(start),
                  t.frames.begin() + static_cast<std::ptrdiff_t>(start + length));
  return s;
}

/// Overlapping windows of `length` frames every `stride` frames; the final
/// partial window is dropped and tracks shorter than `length` are skipped.
inline SampledWindows sample_original(std::span<const Track* const> tracks, std::size_t length, std::size_t stride) {
  if (length < 2) throw std::invalid_argument("sample_original: window length must be >= 2");
  if (stride < 1) throw std::invalid_argument("sample_original: stride must be >= 1");
  SampledWindows out;
  for (const Track* t : tracks) {
    if (t->frames.size() < length) {
      ++out.skipped_tracks;
      continue;
    }
    for (std::size_t start = 0; start + length <= t->frames.size(); start += stride)
      out.samples.push_back(cut_window(*t, start, length));
  }
  return out;
}

/// Position of the first crossing frame, if the track has one.
inline std::optional<std::size_t> crossing_event(const Track& t) {
  for (std::size_t i = 0; i < t.frames.size(); ++i)
    if (t.frames[i].crossing_phase == CrossingPhase::crossing) return i;
  return std::nullopt;
}

/// Anchor for the event-to-crossing protocol: the crossing event, or the last
/// frame for tracks that never cross.
inline std::size_t event_anchor(const Track& t) {
  if (auto e = crossing_event(t)) return *e;
  return t.frames.empty() ? 0 : t.frames.size() - 1;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// One window per track ending L frames before the event anchor, with L drawn
/// uniformly from [min_lead_s * fps, max_lead_s * fps]. Windows that would
/// start before the first frame are dropped.
inline SampledWindows sample_event_to_crossing(std::span<const Track* const> tracks, std::size_t length,
                                               double min_lead_s, double max_lead_s, double fps,
                                               std::uint64_t seed) {
  if (!(min_lead_s > 0.0 && min_lead_s < max_lead_s))
    throw std::invalid_argument("sample_event_to_crossing: require 0 < min_lead_s < max_lead_s");
  if (!(fps > 0.0)) throw std::invalid_argument("sample_event_to_crossing: fps must be positive");
  if (length < 1) throw std::invalid_argument("sample_event_to_crossing: window length must be >= 1");
  const auto lo = static_cast<long>(std::ceil(min_lead_s * fps));
  const auto hi = static_cast<long>(std::floor(max_lead_s * fps));
  SampledWindows out;
  for (std::size_t k = 0; k < tracks.size(); ++k) {
    const Track& t = *tracks[k];
    std::mt19937_64 rng(mix_seed(seed, k));
    const long lead = std::uniform_int_distribution<long>(lo, hi)(rng);
    const long end = static_cast<long>(event_anchor(t)) - lead;
    const long start = end - static_cast<long>(length) + 1;
    if (t.frames.empty() || start < 0 || end < 0) {
      ++out.skipped_tracks;
      continue;
    }
    out.samples.push_back(cut_window(t, static_cast<std::size_t>(start), length));
  }
  return out;
}

/// Infinite, seeded stream of sample indices drawn with probability inversely
/// proportional to the frequency of each sample's final-frame intent label.
class BalancedSampler {
 public:
  BalancedSampler(std::span<const SequenceSample> samples, std::uint64_t seed) : rng_(seed) {
    std::array<std::size_t, 2> counts{0, 0};
    for (const auto& s : samples) ++counts[s.final_intent() ? 1 : 0];
    if (counts[0] == 0 || counts[1] == 0)
      throw std::invalid_argument("balanced_sampler: dataset contains a single intent class; use plain shuffling");
    weights_.reserve(samples.size());
    for (const auto& s : samples) weights_.push_back(1.0 / static_cast<double>(counts[s.final_intent() ? 1 : 0]));
    dist_ = std::discrete_distribution<std::size_t>(weights_.begin(), weights_.end());
  }

  std::size_t next() { return dist_(rng_); }

  std::vector<double> probabilities() const { return dist_.probabilities(); }

 private:
  std::mt19937_64 rng_;
  std::vector<double> weights_;
  std::discrete_distribution<std::size_t> dist_;
};

// ---------------------------------------------------------------------------
// visual features

class MissingFeature : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class VisualFeatureProvider {
 public:
  virtual ~VisualFeatureProvider() = default;
  virtual std::size_t dim() const = 0;
  /// Throws MissingFeature when the key is unknown.
  virtual std::span<const float> find(std::string_view key) const = 0;

  std::span<const float> lookup(std::string_view track_id, int frame_index) const {
    return find(feature_key(track_id, frame_index));
  }
};

/// In-memory provider that keeps insertion order for serialization.
class FeatureStore final : public VisualFeatureProvider {
 public:
  explicit FeatureStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const override { return dim_; }

  void insert(std::string key, std::vector<float> values) {
    if (values.size() != dim_)
      throw std::invalid_argument("feature '" + key + "' has length " + std::to_string(values.size()) +
                                  ", expected " + std::to_string(dim_));
    if (index_.contains(key)) throw std::invalid_argument("duplicate feature key '" + key + "'");
    index_.emplace(key, keys_.size());
    keys_.push_back(std::move(key));
    data_.insert(data_.end(), values.begin(), values.end());
  }

  std::span<const float> find(std::string_view key) const override {
    auto it = index_.find(std::string(key));
    if (it == index_.end()) throw MissingFeature("missing visual feature '" + std::string(key) + "'");
    return std::span<const float>(data_).subspan(it->second * dim_, dim_);
  }

  bool contains(std::string_view key) const { return index_.contains(std::string(key)); }
  std::size_t size() const { return keys_.size(); }
  const std::vector<std::string>& keys() const { return keys_; }

  friend bool operator==(const FeatureStore& a, const FeatureStore& b) {
    return a.dim_ == b.dim_ && a.keys_ == b.keys_ && a.data_ == b.data_;
  }

 private:
  std::size_t dim_;
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> data_;
};

}  // namespace crosswatch::data

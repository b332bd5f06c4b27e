#pragma once

// On-disk formats for datasets.
//
// annotations.jsonl: line 1 is a header object
//   {"schema":"crosswatch-ann-1","fps":30.0,"splits":{"train":[ids],"val":[ids],"test":[ids]}}
// followed by one frame-annotation object per line.
//
// features.bin: "PEDFEAT1", u32 LE dimensionality D, then records of
//   u32 LE key length, UTF-8 key "track_id/frame_index", D x f32 LE.

#include "crosswatch/data_model.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <unordered_map>

namespace crosswatch::io {

inline constexpr std::string_view kAnnotationSchema = "crosswatch-ann-1";
inline constexpr std::string_view kFeatureMagic = "PEDFEAT1";

using ordered_json = nlohmann::ordered_json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Error located at a 1-based line of an annotation file.
class AnnotationError : public FormatError {
 public:
  AnnotationError(std::size_t line, const std::string& msg, const std::string& source = "")
      : FormatError((source.empty() ? "line " : source + ":") + std::to_string(line) + ": " + msg),
        line_(line),
        detail_(msg) {}
  std::size_t line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

// ---------------------------------------------------------------------------
// annotations

namespace detail {

inline ordered_json box_json(const data::BoundingBox& b) {
  return ordered_json{{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}};
}

inline ordered_json frame_json(const std::string& track_id, const data::FrameAnnotation& f) {
  ordered_json objects = ordered_json::array();
  for (const auto& o : f.objects) {
    ordered_json j{{"object_type", data::to_string(o.object_type)}, {"box", box_json(o.box)}};
    if (o.light_type) j["light_type"] = data::to_string(*o.light_type);
    if (o.light_state) j["light_state"] = data::to_string(*o.light_state);
    if (o.sign_type) j["sign_type"] = data::to_string(*o.sign_type);
    objects.push_back(std::move(j));
  }
  return ordered_json{
      {"track_id", track_id},
      {"frame_index", f.frame_index},
      {"box", box_json(f.box)},
      {"base_action", data::to_string(f.base_action)},
      {"intent", f.intent},
      {"crossing_phase", data::to_string(f.crossing_phase)},
      {"semantic_action", data::to_string(f.semantic_action)},
      {"objects", std::move(objects)},
      {"ego", ordered_json{{"v", f.ego.v}, {"a", f.ego.a}, {"v_yaw", f.ego.v_yaw}, {"a_yaw", f.ego.a_yaw}}},
      {"visual_feature_key", f.visual_feature_key},
  };
}

class RecordReader {
 public:
  RecordReader(const nlohmann::json& j, std::size_t line, std::string where)
      : j_(j), line_(line), where_(std::move(where)) {
    if (!j_.is_object()) fail("expected an object");
  }

  void only(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, _] : j_.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) fail("unknown field '" + key + "'");
    }
  }

  bool has(std::string_view key) const { return j_.contains(std::string(key)); }

  const nlohmann::json& field(std::string_view key) const {
    auto it = j_.find(std::string(key));
    if (it == j_.end()) fail("missing field '" + std::string(key) + "'");
    return *it;
  }

  double number(std::string_view key) const {
    const auto& v = field(key);
    if (!v.is_number()) fail("field '" + std::string(key) + "' must be a number");
    return v.get<double>();
  }

  long integer(std::string_view key) const {
    const auto& v = field(key);
    if (!v.is_number_integer()) fail("field '" + std::string(key) + "' must be an integer");
    return v.get<long>();
  }

  std::string string(std::string_view key) const {
    const auto& v = field(key);
    if (!v.is_string()) fail("field '" + std::string(key) + "' must be a string");
    return v.get<std::string>();
  }

  template <class E>
  E enumeration(std::string_view key) const {
    const std::string s = string(key);
    auto e = data::parse_enum<E>(s);
    if (!e) fail("unknown value '" + s + "' for field '" + std::string(key) + "'");
    return *e;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw AnnotationError(line_, where_.empty() ? msg : where_ + ": " + msg);
  }

  std::size_t line() const { return line_; }

 private:
  const nlohmann::json& j_;
  std::size_t line_;
  std::string where_;
};

inline data::BoundingBox read_box(const RecordReader& parent, std::string_view key, const std::string& where) {
  RecordReader r(parent.field(key), parent.line(), where);
  r.only({"x1", "y1", "x2", "y2"});
  data::BoundingBox b{r.number("x1"), r.number("y1"), r.number("x2"), r.number("y2")};
  if (!b.valid()) r.fail("invalid box: requires x1 <= x2 and y1 <= y2");
  return b;
}

}  // namespace detail

inline std::string format_annotations(const data::Dataset& ds) {
  ordered_json splits{{"train", ordered_json::array()}, {"val", ordered_json::array()}, {"test", ordered_json::array()}};
  for (const auto& t : ds.tracks) splits[std::string(data::to_string(t.split))].push_back(t.track_id);
  std::string out = ordered_json{{"schema", kAnnotationSchema}, {"fps", ds.fps}, {"splits", std::move(splits)}}.dump();
  out += '\n';
  for (const auto& [split, _] : data::EnumNames<data::Split>::table)
    for (const auto* t : ds.split(split))
      for (const auto& f : t->frames) {
        out += detail::frame_json(t->track_id, f).dump();
        out += '\n';
      }
  return out;
}

/// Parses and validates an annotation document. Violations carry line numbers.
inline data::Dataset parse_annotations(std::istream& in) {
  data::Dataset ds;
  std::string line;
  std::size_t lineno = 0;

  auto parse_line = [&](const std::string& text) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw AnnotationError(lineno, std::string("malformed record: ") + e.what());
    }
  };

  if (!std::getline(in, line)) throw AnnotationError(1, "missing header line");
  lineno = 1;
  std::unordered_map<std::string, std::size_t> track_index;
  {
    const auto header = parse_line(line);
    detail::RecordReader r(header, lineno, "header");
    r.only({"schema", "fps", "splits"});
    if (r.string("schema") != kAnnotationSchema)
      r.fail("unsupported schema '" + r.string("schema") + "', expected '" + std::string(kAnnotationSchema) + "'");
    ds.fps = r.number("fps");
    if (!(ds.fps > 0.0)) r.fail("fps must be positive");
    detail::RecordReader splits(r.field("splits"), lineno, "header.splits");
    splits.only({"train", "val", "test"});
    for (const auto& [split, name] : data::EnumNames<data::Split>::table) {
      if (!splits.has(name)) continue;
      const auto& ids = splits.field(name);
      if (!ids.is_array()) splits.fail("split '" + std::string(name) + "' must be an array");
      for (const auto& id : ids) {
        if (!id.is_string()) splits.fail("track ids must be strings");
        const auto s = id.get<std::string>();
        if (track_index.contains(s)) splits.fail("track '" + s + "' listed twice");
        track_index.emplace(s, ds.tracks.size());
        ds.tracks.push_back(data::Track{s, split, {}});
      }
    }
  }

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = parse_line(line);
    detail::RecordReader r(j, lineno, "");
    r.only({"track_id", "frame_index", "box", "base_action", "intent", "crossing_phase", "semantic_action", "objects",
            "ego", "visual_feature_key"});
    const std::string id = r.string("track_id");
    auto it = track_index.find(id);
    if (it == track_index.end()) r.fail("track '" + id + "' is not listed in the header split manifest");
    data::Track& track = ds.tracks[it->second];

    data::FrameAnnotation f;
    const long fi = r.integer("frame_index");
    if (fi < 0 || fi > std::numeric_limits<int>::max()) r.fail("frame_index out of range");
    f.frame_index = static_cast<int>(fi);
    if (!track.frames.empty() && f.frame_index <= track.frames.back().frame_index)
      r.fail("frame_index " + std::to_string(f.frame_index) + " of track '" + id + "' is not strictly increasing");
    f.box = detail::read_box(r, "box", "box");
    f.base_action = r.enumeration<data::BaseAction>("base_action");
    const long intent = r.integer("intent");
    if (intent != 0 && intent != 1) r.fail("intent must be 0 or 1");
    f.intent = static_cast<int>(intent);
    f.crossing_phase = r.enumeration<data::CrossingPhase>("crossing_phase");
    f.semantic_action = r.enumeration<data::SemanticAction>("semantic_action");
    if (f.semantic_action != data::augment_actions(f.base_action, f.intent, f.crossing_phase))
      r.fail("semantic_action '" + std::string(data::to_string(f.semantic_action)) +
             "' is inconsistent with (base_action, intent, crossing_phase)");

    const auto& objects = r.field("objects");
    if (!objects.is_array()) r.fail("field 'objects' must be an array");
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const std::string where = "objects[" + std::to_string(k) + "]";
      detail::RecordReader o(objects[k], lineno, where);
      o.only({"object_type", "box", "light_type", "light_state", "sign_type"});
      data::TrafficObjectRecord rec;
      rec.object_type = o.enumeration<data::ObjectType>("object_type");
      rec.box = detail::read_box(o, "box", where + ".box");
      if (o.has("light_type")) rec.light_type = o.enumeration<data::LightType>("light_type");
      if (o.has("light_state")) rec.light_state = o.enumeration<data::LightState>("light_state");
      if (o.has("sign_type")) rec.sign_type = o.enumeration<data::SignType>("sign_type");
      if (auto err = rec.validate()) o.fail(*err);
      f.objects.push_back(rec);
    }

    detail::RecordReader ego(r.field("ego"), lineno, "ego");
    ego.only({"v", "a", "v_yaw", "a_yaw"});
    f.ego = {ego.number("v"), ego.number("a"), ego.number("v_yaw"), ego.number("a_yaw")};
    if (!f.ego.valid()) ego.fail("ego values must be finite");
    f.visual_feature_key = r.string("visual_feature_key");
    track.frames.push_back(std::move(f));
  }

  for (const auto& t : ds.tracks)
    if (t.frames.empty()) throw AnnotationError(1, "track '" + t.track_id + "' has no frame records");
  return ds;
}

inline void write_annotations(const std::filesystem::path& path, const data::Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << format_annotations(ds);
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline data::Dataset load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  try {
    return parse_annotations(in);
  } catch (const AnnotationError& e) {
    throw AnnotationError(e.line(), e.detail(), path.string());
  }
}

// ---------------------------------------------------------------------------
// features

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string format_features(const data::FeatureStore& store) {
  std::string out(kFeatureMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(store.dim()));
  for (const auto& key : store.keys()) {
    detail::put_u32(out, static_cast<std::uint32_t>(key.size()));
    out += key;
    for (float v : store.find(key)) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

/// Parses a feature file; `expected_dim`, when given, must match the header.
inline data::FeatureStore parse_features(std::string_view bytes, std::optional<std::size_t> expected_dim = {}) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < kFeatureMagic.size() + 4 || bytes.substr(0, kFeatureMagic.size()) != kFeatureMagic)
    throw FormatError("feature file: bad magic, expected '" + std::string(kFeatureMagic) + "'");
  std::size_t pos = kFeatureMagic.size();
  const std::size_t dim = detail::get_u32(p + pos);
  pos += 4;
  if (dim == 0) throw FormatError("feature file: dimensionality must be positive");
  if (expected_dim && *expected_dim != dim)
    throw FormatError("feature file: dimensionality " + std::to_string(dim) + " does not match configured " +
                      std::to_string(*expected_dim));
  data::FeatureStore store(dim);
  while (pos < n) {
    if (n - pos < 4) throw FormatError("feature file: truncated key length at byte " + std::to_string(pos));
    const std::size_t klen = detail::get_u32(p + pos);
    pos += 4;
    if (klen == 0 || n - pos < klen)
      throw FormatError("feature file: bad key length " + std::to_string(klen) + " at byte " + std::to_string(pos - 4));
    std::string key(bytes.substr(pos, klen));
    pos += klen;
    const std::size_t have = (n - pos) / 4;
    if (have < dim)
      throw FormatError("feature file: record '" + key + "' has " + std::to_string(have) + " values, expected " +
                        std::to_string(dim));
    std::vector<float> values(dim);
    for (std::size_t i = 0; i < dim; ++i, pos += 4) values[i] = std::bit_cast<float>(detail::get_u32(p + pos));
    if (store.contains(key)) throw FormatError("feature file: duplicate key '" + key + "'");
    store.insert(std::move(key), std::move(values));
  }
  return store;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline void write_features(const std::filesystem::path& path, const data::FeatureStore& store) {
  write_file(path, format_features(store));
}

inline data::FeatureStore load_features(const std::filesystem::path& path, std::optional<std::size_t> expected_dim = {}) {
  return parse_features(read_file(path), expected_dim);
}

/// Every frame of every track must have a feature vector.
inline void check_feature_coverage(const data::Dataset& ds, const data::VisualFeatureProvider& features) {
  for (const auto& t : ds.tracks)
    for (const auto& f : t.frames) (void)features.lookup(t.track_id, f.frame_index);
}

/// Standard file names inside a dataset directory.
struct DatasetPaths {
  std::filesystem::path dir;
  std::filesystem::path annotations() const { return dir / "annotations.jsonl"; }
  std::filesystem::path features() const { return dir / "features.bin"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
};

}  // namespace crosswatch::io

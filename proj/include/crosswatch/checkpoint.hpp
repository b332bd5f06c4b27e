#pragma once

// Checkpoint container:
//   "CWCKPT01" | u64 LE manifest length | manifest (JSON text) | f64 LE values
// The manifest records the model configuration and, per parameter, its name,
// shape and offset (in values) into the data section.

#include "crosswatch/behavior_model.hpp"
#include "crosswatch/io.hpp"

#include <json.hpp>

#include <bit>
#include <filesystem>
#include <memory>
#include <string>

namespace crosswatch::checkpoint {

inline constexpr std::string_view kMagic = "CWCKPT01";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string serialize(const model::BehaviorModel& m, const nlohmann::ordered_json& metadata = {}) {
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& p : m.params()) {
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.size();
  }
  nlohmann::ordered_json manifest{{"format", kMagic}, {"model", model::to_json(m.config())}, {"parameters", params}};
  if (!metadata.is_null()) manifest["metadata"] = metadata;
  const std::string text = manifest.dump();

  std::string out(kMagic);
  const auto len = static_cast<std::uint64_t>(text.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xffu));
  out += text;
  out.reserve(out.size() + offset * 8);
  for (const auto& p : m.params())
    for (double v : p.value.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
    }
  return out;
}

struct Loaded {
  std::unique_ptr<model::BehaviorModel> model;
  nlohmann::json metadata;
};

/// Rebuilds the model from the embedded configuration and fills every
/// parameter, validating names and shapes. `expected`, when given, must equal
/// the stored configuration.
inline Loaded deserialize(std::string_view bytes, const model::ModelConfig* expected = nullptr) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic)
    throw CheckpointError("checkpoint: bad magic, expected '" + std::string(kMagic) + "'");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(p[kMagic.size() + i]) << (8 * i);
  const std::size_t data_start = kMagic.size() + 8 + len;
  if (len > bytes.size() || data_start > bytes.size()) throw CheckpointError("checkpoint: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kMagic.size() + 8, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }

  model::ModelConfig cfg;
  try {
    cfg = model::model_config_from_json(manifest.at("model"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: invalid model configuration: ") + e.what());
  }
  if (expected && !(*expected == cfg)) throw CheckpointError("checkpoint: stored configuration does not match the expected architecture");

  auto m = std::make_unique<model::BehaviorModel>(cfg);
  const auto& entries = manifest.at("parameters");
  if (!entries.is_array() || entries.size() != m->params().size())
    throw CheckpointError("checkpoint: expected " + std::to_string(m->params().size()) + " parameters, manifest lists " +
                          std::to_string(entries.is_array() ? entries.size() : 0));
  const std::size_t values = (bytes.size() - data_start) / 8;
  if ((bytes.size() - data_start) % 8 != 0) throw CheckpointError("checkpoint: data section is not a whole number of values");

  std::size_t k = 0;
  for (auto& param : m->params()) {
    const auto& e = entries[k++];
    const auto name = e.at("name").get<std::string>();
    if (name != param.name)
      throw CheckpointError("checkpoint: parameter #" + std::to_string(k - 1) + " is '" + name + "', expected '" + param.name + "'");
    const auto shape = e.at("shape").get<ad::Shape>();
    if (shape != param.value.shape())
      throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                            ad::shape_str(param.value.shape()));
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + param.value.size() > values)
      throw CheckpointError("checkpoint: parameter '" + name + "' extends past the data section");
    const unsigned char* src = p + data_start + offset * 8;
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(src[i * 8 + b]) << (8 * b);
      param.value[i] = std::bit_cast<double>(bits);
    }
  }
  return {std::move(m), manifest.contains("metadata") ? manifest["metadata"] : nlohmann::json{}};
}

inline void save(const std::filesystem::path& path, const model::BehaviorModel& m,
                 const nlohmann::ordered_json& metadata = {}) {
  io::write_file(path, serialize(m, metadata));
}

inline Loaded load(const std::filesystem::path& path, const model::ModelConfig* expected = nullptr) {
  return deserialize(io::read_file(path), expected);
}

/// Copies parameter values between models of identical architecture.
inline void copy_values(const model::BehaviorModel& from, model::BehaviorModel& to) {
  auto it = from.params().begin();
  for (auto& p : to.params()) {
    if (it == from.params().end() || it->name != p.name || it->value.shape() != p.value.shape())
      throw CheckpointError("copy_values: architectures differ at '" + p.name + "'");
    p.value = it->value;
    ++it;
  }
}

}  // namespace crosswatch::checkpoint

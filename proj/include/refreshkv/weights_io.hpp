#pragma once

#include <filesystem>

#include <json.hpp>

#include "refreshkv/model.hpp"

namespace refreshkv {

// Weight file layout:
//   bytes [0, 8)       header length N, unsigned 64-bit little-endian
//   bytes [8, 8 + N)   UTF-8 JSON: {"format", "config", "tensors": [{"name", "shape", "offset"}]}
//   remainder          tensor payload, 64-bit IEEE floats, little-endian;
//                      "offset" is in bytes from the start of the payload
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
// Missing keys keep their defaults; unknown keys are rejected with ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace refreshkv

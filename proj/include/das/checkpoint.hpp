#pragma once
// Checkpoint container: a directory with manifest.json (config, parameter
// paths and shapes) plus one raw little-endian float32 blob per parameter,
// named after the parameter path.

#include <filesystem>
#include <string>

#include "das/lora.hpp"
#include "das/model.hpp"
#include "json.hpp"

namespace das {

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Writes `w` under `dir` (created if missing). `meta` lands in the manifest.
void save_model(const std::filesystem::path& dir, const TransformerWeights& w, const nlohmann::json& meta = {});

/// Reads a model checkpoint; `meta_out` receives the manifest's meta block.
TransformerWeights load_model(const std::filesystem::path& dir, nlohmann::json* meta_out = nullptr);

void save_adapter(const std::filesystem::path& dir, const LoraAdapter& adapter, const nlohmann::json& meta = {});

/// Reads an adapter checkpoint. A non-empty `expected_base_id` that differs
/// from the recorded base id raises ConfigError.
LoraAdapter load_adapter(const std::filesystem::path& dir, const std::string& expected_base_id = {},
                         nlohmann::json* meta_out = nullptr);

/// Base id recorded in an adapter manifest, without loading tensors.
std::string adapter_base_id(const std::filesystem::path& dir);

void write_matrix_blob(const std::filesystem::path& file, const Matrix& m);
Matrix read_matrix_blob(const std::filesystem::path& file, std::size_t rows, std::size_t cols);

}  // namespace das

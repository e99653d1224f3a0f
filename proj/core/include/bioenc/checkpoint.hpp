#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bioenc/model.hpp"
#include "bioenc/units.hpp"

namespace bioenc {

/// Binary container layout, all integers little-endian:
///
///   "AVSC"                       4 bytes magic
///   format_version               u32
///   metadata_length              u64, then that many bytes of JSON
///   tensor_count                 u32
///   per tensor, sorted by name:
///     name_length u32, name bytes (UTF-8)
///     dtype u8 (0 = f32)
///     ndim u32, then ndim x u64 dims
///     payload_length u64 (= product(dims) * 4), then f32 payload
///
/// Metadata keys are emitted sorted, so save -> load -> save is
/// byte-identical.
struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> data;
};

struct CheckpointContainer {
  static constexpr std::uint32_t kFormatVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

std::vector<std::uint8_t> serialize(const CheckpointContainer& container);
CheckpointContainer deserialize(std::span<const std::uint8_t> bytes);

/// Atomic write: temp file in the same directory, then rename.
void save_checkpoint(const std::filesystem::path& path, const CheckpointContainer& container);
CheckpointContainer load_checkpoint(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temp file + rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

Tensor to_tensor(const Mat& m);
Mat to_mat(const Tensor& t);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Stores parameters as "model.<registry name>" plus metadata["model"].
void put_model(CheckpointContainer& c, const EncoderModel& model);
/// Throws DataError if a tensor is missing or has the wrong shape.
EncoderModel get_model(const CheckpointContainer& c);

/// Stores centroids and standardization stats under "<prefix>.*" and the fit
/// metadata under metadata["codebooks"][prefix].
void put_codebook(CheckpointContainer& c, const std::string& prefix, const Codebook& codebook);
Codebook get_codebook(const CheckpointContainer& c, const std::string& prefix);

/// Unit sequences as "<prefix>.<source_id>" tensors of unit indices.
void put_units(CheckpointContainer& c, const std::string& prefix, std::span<const UnitSequence> units);
std::vector<UnitSequence> get_units(const CheckpointContainer& c, const std::string& prefix);

/// One JSON object per line: {"source_id": ..., "units": [...]}.
std::string units_to_jsonl(std::span<const UnitSequence> units);

}  // namespace bioenc

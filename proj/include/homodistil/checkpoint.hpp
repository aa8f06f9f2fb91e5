#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "homodistil/losses.hpp"
#include "homodistil/model.hpp"
#include "homodistil/optimizer.hpp"
#include "homodistil/pruning.hpp"

namespace homodistil {

/// Everything a run persists. A checkpoint directory holds manifest.json and
/// one raw little-endian float64 row-major blob per named tensor:
///   model.<param>            model weights
///   model.hidden_live        live hidden columns
///   proj.<hidden|embedding>  distillation projections
///   mask.<group>             coupling-group masks
///   ema.score.<param>, ema.uncertainty.<param>
///   adam.m.<param>, adam.v.<param>
struct Checkpoint {
  TransformerModel model;
  std::optional<ProjectionSet> projections;
  std::optional<pruning::MaskSet> masks;
  std::optional<pruning::ImportanceState> importance;
  std::optional<Adam> optimizer;
  nlohmann::json counters = nlohmann::json::object();  // e.g. {"step": 400}
  nlohmann::json metadata = nlohmann::json::object();  // free-form run details
};

inline constexpr const char* kManifestName = "manifest.json";

/// Writes `ckpt` into `dir` (created if needed). Blobs and manifest left by
/// an earlier save into the same directory are replaced.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

/// Reads a checkpoint written by save_checkpoint. Throws InputError for a
/// missing or malformed directory and IntegrityError for a blob whose size or
/// checksum disagrees with the manifest.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a 64 over the manifest and every blob, in name order, as hex.
std::string checkpoint_digest(const std::filesystem::path& dir);

/// FNV-1a 64 of a byte range, as 16 hex digits.
std::string fnv1a_hex(const void* data, std::size_t size);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace homodistil

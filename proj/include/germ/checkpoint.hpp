#pragma once

#include <string>

#include "germ/model.hpp"

namespace germ {

// On-disk container: "GERM" magic, u32 format version, canonical JSON header
// (config, step, kind, tensor manifest), then a little-endian contiguous
// payload. Round-trips are bit-exact at the declared dtype.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointDtype { F32, F64 };

// Atomic write (temp file + rename). f32 payload by default; f64 for
// fixtures that need the full double precision back.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path,
                     CheckpointDtype dtype = CheckpointDtype::F32);

Checkpoint load_checkpoint(const std::string& path);

// Config <-> JSON text used by the checkpoint header and the CLI.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

}  // namespace germ

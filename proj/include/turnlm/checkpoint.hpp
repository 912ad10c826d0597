#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "turnlm/model.hpp"

namespace turnlm {

/// Binary layout, all integers little-endian:
///   8 bytes  magic "TURNLMCK"
///   u32      format version (1)
///   u32 n, n bytes   ModelConfig as "key=value\n" text
///   u32      tensor count
///   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank],
///               prod(dims) float64 values in row-major order
inline constexpr std::string_view kCheckpointMagic = "TURNLMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_to_text(const ModelConfig& config);
ModelConfig config_from_text(std::string_view text);

std::string serialize_checkpoint(const ModelParameters& params);
ModelParameters deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params);
ModelParameters load_checkpoint(const std::filesystem::path& path);

}  // namespace turnlm

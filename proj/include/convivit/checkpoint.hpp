#pragma once

#include <cstdint>
#include <filesystem>

#include "convivit/model.hpp"

namespace convivit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "CVVTW" | u32 version | u32 length + model config text (key=value lines) |
/// per tensor until end of file: u32 name length, name bytes, u32 rank,
/// u32 extents, little-endian f32 values.
void save_checkpoint(const ConViViT& model, const std::filesystem::path& path);
ConViViT load_checkpoint(const std::filesystem::path& path);

}  // namespace convivit

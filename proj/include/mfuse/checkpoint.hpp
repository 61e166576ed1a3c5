#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "mfuse/nn.hpp"

namespace mfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout, little-endian throughout:
///   "MFUSECK\0", u32 version, u64 config digest, u64 parameter count,
///   then per parameter: u32 name length, name bytes, u32 rank,
///   rank x u64 extents, numel x f64 values.
void save_checkpoint(std::ostream& os, const ParamStore& params, std::uint64_t config_digest);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, std::uint64_t config_digest);

/// Overwrites the values of `params`. Names, order, shapes and the config
/// digest must all match, otherwise nothing is modified and Error is thrown.
void load_checkpoint(std::istream& is, ParamStore& params, std::uint64_t config_digest);
void load_checkpoint(const std::filesystem::path& path, ParamStore& params, std::uint64_t config_digest);

}  // namespace mfuse

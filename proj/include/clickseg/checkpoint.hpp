#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/tensor.hpp"

namespace clickseg {

/// Ordered named tensors as stored in a weights file.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Binary weights file: magic "ABSW", u32 format version, then per tensor a
/// record of u16 name length, name bytes, u8 rank, u32 extents, and the values
/// as 64-bit little-endian floats. Round-trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::filesystem::path& path);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace clickseg

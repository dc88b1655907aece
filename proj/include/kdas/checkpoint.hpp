// "ODTW" tensor checkpoint files.
//
// Layout (all integers little-endian):
//   magic "ODTW" | version u32 | entry count u32 |
//   per entry: name length u16, UTF-8 name, rank u8, dims u32 x rank, f64 values
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kdas/tensor.hpp"

namespace kdas {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const NamedTensors& entries);
NamedTensors decode_checkpoint(const std::string& bytes);

}  // namespace kdas

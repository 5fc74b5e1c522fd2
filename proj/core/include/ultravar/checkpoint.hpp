#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ultravar/nn.hpp"

namespace uvar {

inline constexpr char kCheckpointMagic[8] = {'U', 'V', 'A', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config_json;
  ParamList tensors;
};

// magic | u32 version | u64 config length | config | u64 tensor count |
// per tensor: u32 name length, name, u32 rank, u64 dims, f32 data |
// u32 CRC32 of all preceding bytes. Little-endian throughout.
std::vector<std::uint8_t> encode_checkpoint(const std::string& config_json, const ParamList& tensors);
CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::string& config_json, const ParamList& tensors);
CheckpointData load_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace uvar

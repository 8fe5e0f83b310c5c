#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "stemnet/unet.hpp"

namespace stemnet {

// Binary layout (all integers little-endian):
//   "BSUN" | u32 version | u64 json_len | json header | tensor records
// with each record: u32 name_len | name | u8 dtype (1 = f32) | u8 rank |
// u64 extents[rank] | raw data. The json header carries config, stage,
// epoch, seed and whether optimizer momentum buffers follow the params.
struct Checkpoint {
  UNetConfig config;
  std::string stage = "final";  // "pretrain" | "final"
  int epoch = 0;
  std::uint64_t seed = 0;
  UNetParams<float> params;
  std::optional<UNetParams<float>> velocity;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws FormatError (corrupt or foreign file), VersionError (wrong version),
// MissingTensorError (schema tensor absent).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stemnet

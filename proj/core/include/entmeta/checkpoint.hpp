#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "entmeta/meta.hpp"

namespace entmeta {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::string method;
  std::size_t meta_steps = 0;

  friend bool operator==(const CheckpointInfo&, const CheckpointInfo&) = default;
};

struct Checkpoint {
  MetaParams params;
  CheckpointInfo info;
};

/// One JSON header line (architecture, decoder shape, seed, version, sizes)
/// followed by the encoder and then the decoder flat vectors as raw
/// little-endian float64.
std::string checkpoint_to_bytes(const MetaParams& params, const CheckpointInfo& info);
Checkpoint checkpoint_from_bytes(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const MetaParams& params, const CheckpointInfo& info);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace entmeta

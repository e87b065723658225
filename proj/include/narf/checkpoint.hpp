#pragma once

// Binary checkpoints; layout documented in docs/checkpoint_format.md.

#include "narf/fields.hpp"
#include "narf/optim.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>

namespace narf {

inline constexpr char kCheckpointMagic[8] = {'N', 'A', 'R', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::shared_ptr<FieldModel> model;
  AdamState optimizer;
  std::uint64_t iteration = 0;
  std::uint64_t config_hash = 0;
  // Training configuration that produced the weights (informational).
  nlohmann::json train_config;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws Error on a bad magic, unknown version, truncation or a parameter
// set that does not match the stored descriptor.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace narf

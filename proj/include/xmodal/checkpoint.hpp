#pragma once

// Checkpoint container:
//   line 1: "XMODAL-CHECKPOINT"
//   line 2: single-line JSON header {format_version, config, tensors[], metadata}
//   then, for every tensor listed in the header, in order:
//     u32 name length, name bytes, shape-prefixed little-endian f32 record
// Parameters are stored as 32-bit floats regardless of training precision.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

inline constexpr int kCheckpointVersion = 1;

/// Optional payload stored next to the parameters: free-form metadata and
/// flat state vectors (optimizer slots) used to resume training.
struct CheckpointExtras {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::VectorXf>> state;

  const Eigen::VectorXf* find_state(const std::string& name) const;
};

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::filesystem::path& path,
                     const CheckpointExtras& extras = {});

/// Throws CorruptFile on bad magic, unknown version, truncation, or tensors
/// that do not match the stored config.
template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointExtras* extras = nullptr);

/// Reads only the config from a checkpoint header.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace xmodal

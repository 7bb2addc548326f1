#pragma once

#include "evfuse/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace evfuse {

inline constexpr int kCheckpointSchemaVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Rounds every parameter to the nearest f32 so a saved checkpoint reloads
/// to exactly the weights that were last evaluated.
void round_parameters_to_f32(const SteeringModel& model);

struct Checkpoint {
  SteeringModel model;
  nlohmann::json extra;  // training-side state, e.g. input normalization
  std::string config_hash;
};

/// Writes manifest.json and params.bin (little-endian f32 in manifest order).
void save_checkpoint(const std::filesystem::path& dir, const SteeringModel& model, const nlohmann::json& extra,
                     const std::string& config_hash);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace evfuse

#pragma once

#include "evfuse/learn.hpp"
#include "evfuse/model.hpp"
#include "evfuse/simworld.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evfuse {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Simulator recipe for a dataset of independent bags.
struct DataConfig {
  int train_bags = 5;
  int test_bags = 2;
};

struct BenchConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<int> latent_values{2, 4, 8, 16, 32};
  /// (rotation degrees, translation meters) applied to the stored extrinsics of test bags.
  std::vector<std::pair<double, double>> perturbations{{0.0, 0.0}, {1.0, 0.01}, {2.0, 0.02}, {4.0, 0.04}, {8.0, 0.08}};
};

struct RunConfig {
  std::uint64_t seed = 1;  // dataset generation and default training seed
  DataConfig data;
  sim::SimConfig sim;
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  BenchConfig bench;
};

/// Parses TOML text; unknown keys and wrongly typed values raise ConfigError.
RunConfig parse_config(const std::string& toml_text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);
/// Re-derives dependent fields (input size, model and optimizer seeds) and
/// validates; call after changing fields in code.
void finalize_config(RunConfig& cfg, const std::string& source = "config");

nlohmann::json to_json(const sim::SimConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);
/// TOML rendering of the full configuration, parseable by parse_config.
std::string to_toml(const RunConfig& cfg);

/// FNV-1a 64 over the canonical (key-sorted, compact) JSON dump, as 16 hex digits.
std::string hash_json(const nlohmann::json& j);

/// Configuration fields that determine the generated bags.
nlohmann::json dataset_json(const RunConfig& cfg);
std::string dataset_hash(const RunConfig& cfg);

/// Simulator settings for the i-th training or test bag.
sim::SimConfig bag_config(const RunConfig& cfg, bool train, int index);

}  // namespace evfuse

#pragma once

#include "evfuse/sensors.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace evfuse {

inline constexpr int kBagSchemaVersion = 1;

/// Contents of meta.json.
struct BagMeta {
  int sensor_width = 0;
  int sensor_height = 0;
  CameraModel camera;  // extrinsics used by the projection pipeline
  /// Extrinsics the simulator rendered with, when they differ from `camera`.
  std::optional<CameraModel> true_camera;
  int beam_count = 0;
  double angle_min = 0.0;
  double angle_increment = 0.0;
  double range_max = 10.0;
  double steering_limit_deg = 30.0;
  int schema_version = kBagSchemaVersion;
  std::string config_hash;
};

/// One recording: sensor geometry plus the three time series.
struct Bag {
  BagMeta meta;
  EventStream events;
  std::vector<LidarScan> scans;
  std::vector<SteeringRecord> steering;
  bool events_loaded = true;
};

class BagFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BagLoadOptions {
  /// Leave events.csv unopened (LiDAR-only pipelines).
  bool load_events = true;
};

Bag load_bag(const std::filesystem::path& dir, const BagLoadOptions& options = {});
void write_bag(const std::filesystem::path& dir, const Bag& bag);

BagMeta read_meta(const std::filesystem::path& dir);

struct ValidationFinding {
  std::string file;
  std::size_t line = 0;  // 1-based, header is line 1; 0 for file-level findings
  std::string kind;      // non_monotone | out_of_range | lead_in | lead_out | schema
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationFinding> findings;
  std::size_t scan_count = 0;
  std::size_t event_count = 0;
  std::size_t steering_count = 0;
  bool ok() const { return findings.empty(); }
};

/// Streams the bag files and reports every integrity problem with its line.
ValidationReport validate_bag(const std::filesystem::path& dir);

/// Drops scans before the first and after the last steering record.
/// Returns the number of scans removed.
std::size_t trim_bag(Bag& bag);

/// One triplet per consecutive scan pair, using the bag's stored extrinsics.
std::vector<SampleTriplet> build_triplets(const Bag& bag);

}  // namespace evfuse

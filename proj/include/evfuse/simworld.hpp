#pragma once

#include "evfuse/bag.hpp"
#include "evfuse/sensors.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace evfuse::sim {

/// Polyline wall with cumulative arc length, used for texture lookup.
struct Wall {
  std::vector<Eigen::Vector2d> points;
  std::vector<double> arc_length;  // same size as points
};

struct Track {
  /// Closed tracks repeat the first waypoint at the end.
  std::vector<Eigen::Vector2d> centerline;
  bool closed = true;
  double half_width = 1.0;
  double stripe_period = 0.5;
  std::vector<Wall> walls;

  /// Builds left/right offset walls from the centerline.
  static Track from_centerline(std::vector<Eigen::Vector2d> centerline, double half_width, double stripe_period,
                               bool closed);
  /// Mirror image about the world x-axis.
  Track mirrored() const;
};

struct TrackConfig {
  int control_points = 8;
  double control_jitter = 0.25;  // relative radial jitter of control radii
  double box_x = 16.0;           // bounding box, meters
  double box_y = 10.0;
  double half_width = 1.0;
  double vehicle_width = 0.3;
  double min_radius = 1.6;
  double stripe_period = 0.5;
  double waypoint_spacing = 0.05;
  int max_attempts = 500;
};

struct VehicleState {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  double heading = 0.0;      // radians
  double speed = 2.0;        // m/s
  double wheelbase = 0.33;   // meters
  double steering_deg = 0.0; // positive = left
};

struct SimConfig {
  std::uint64_t seed = 1;
  double duration_s = 10.0;
  double lidar_hz = 40.0;
  int physics_substeps = 5;
  int beam_count = 271;
  double fov_deg = 270.0;
  double range_max = 10.0;
  int width = 86;
  int height = 65;
  double fx = 60.0;
  double fy = 60.0;
  double cx = 42.5;
  double cy = 32.0;
  double lidar_height = 0.10;   // above the floor
  double camera_height = 0.12;  // above the LiDAR plane
  double wall_height = 0.5;
  double event_threshold = 0.2;  // log-intensity units
  double event_noise_rate = 1e-3;  // events per pixel per frame
  double lidar_noise_sigma = 0.01;
  double speed = 2.0;
  double wheelbase = 0.33;
  double lookahead = 1.0;
  double steering_limit_deg = 30.0;
  double start_offset_max = 0.2;  // lateral start jitter, meters
  double extrinsic_error_deg = 0.0;
  double extrinsic_error_m = 0.0;
  std::uint64_t start_time_ns = 1'000'000'000ULL;
  double intensity_bright = 0.8;
  double intensity_dark = 0.2;
  double intensity_background = 0.45;
  TrackConfig track;
};

/// Smooth closed loop from jittered control points; deterministic per seed.
Track generate_track(std::uint64_t seed, const TrackConfig& cfg = {});

/// Circle of the given radius centred at the origin, counter-clockwise.
Track circle_track(double radius, int waypoints, double half_width, double stripe_period);

/// Signed curvature of the centerline at each waypoint (three-point circle).
std::vector<double> centerline_curvature(const Track& track);

/// Pure-pursuit steering (degrees, clamped) for the current state.
double pure_pursuit_deg(const Track& track, const VehicleState& state, double lookahead, double limit_deg);
/// Lookahead target used by pure pursuit, in world coordinates.
Eigen::Vector2d lookahead_point(const Track& track, const VehicleState& state, double lookahead);

/// One kinematic-bicycle step under pure-pursuit steering.
VehicleState drive(const Track& track, const VehicleState& state, double dt, double lookahead, double limit_deg);

/// Camera extrinsics the simulator renders with.
CameraModel true_camera(const SimConfig& cfg);

LidarScan render_lidar(const Track& track, const VehicleState& state, const SimConfig& cfg, std::mt19937_64& rng);

/// Log-intensity image seen by the event camera.
RowMajorMatrixX<double> render_intensity(const Track& track, const VehicleState& state, const SimConfig& cfg,
                                         const CameraModel& camera);

/// Frame-difference event model: floor(|dlogI| / threshold) events per pixel,
/// evenly spread inside (t1, t2), plus Poisson background noise.
EventStream synthesize_events(const RowMajorMatrixX<double>& img_t1, const RowMajorMatrixX<double>& img_t2,
                              Nanoseconds t1, Nanoseconds t2, double threshold, double noise_rate,
                              std::mt19937_64& rng);

struct SimulationTrace {
  Bag bag;
  Track track;
  std::vector<VehicleState> scan_states;  // vehicle state at each scan
};

SimulationTrace simulate(const SimConfig& cfg);
SimulationTrace simulate_on(const Track& track, const VehicleState& start, const SimConfig& cfg);

/// Simulates and writes a bag directory; returns the in-memory bag.
Bag generate_bag(const SimConfig& cfg, const std::filesystem::path& dir, const std::string& config_hash = {});

}  // namespace evfuse::sim

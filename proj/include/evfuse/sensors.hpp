#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace evfuse {

using Nanoseconds = std::uint64_t;

template <typename Scalar>
using RowMajorMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kNoReturn = std::numeric_limits<double>::infinity();
/// Camera-frame points closer than this along the optical axis are culled.
inline constexpr double kMinCameraDepth = 0.05;

struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  Nanoseconds t = 0;
  std::int8_t p = 1;  // +1 on, -1 off
};

/// Time-ordered events covering [t_start, t_end].
struct EventStream {
  std::vector<Event> events;
  Nanoseconds t_start = 0;
  Nanoseconds t_end = 0;
};

struct LidarScan {
  Nanoseconds t = 0;
  std::vector<double> ranges;  // meters, kNoReturn for no hit
  double angle_min = 0.0;
  double angle_increment = 0.0;
  double range_max = 10.0;

  double beam_angle(std::size_t i) const { return angle_min + static_cast<double>(i) * angle_increment; }
};

/// Pinhole camera with LiDAR-to-camera extrinsics: p_cam = R * p_lidar + t.
template <typename Scalar>
struct PinholeCamera {
  Eigen::Matrix<Scalar, 3, 3> K = Eigen::Matrix<Scalar, 3, 3>::Identity();
  Eigen::Matrix<Scalar, 3, 3> R = Eigen::Matrix<Scalar, 3, 3>::Identity();
  Eigen::Matrix<Scalar, 3, 1> t = Eigen::Matrix<Scalar, 3, 1>::Zero();
  int width = 0;
  int height = 0;

  Scalar fx() const { return K(0, 0); }
  Scalar fy() const { return K(1, 1); }
  Scalar cx() const { return K(0, 2); }
  Scalar cy() const { return K(1, 2); }
};

using CameraModel = PinholeCamera<double>;

class CameraModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws CameraModelError unless R is orthonormal with det +1 (to 1e-9),
/// fx, fy > 0, skew is zero and the image size is positive.
void validate_camera(const CameraModel& cam);

/// Rotation taking a forward/left/up LiDAR frame to a right/down/forward
/// camera frame. With zero translation this is the perfectly aligned mount.
inline Eigen::Matrix3d lidar_to_camera_axes() {
  Eigen::Matrix3d r;
  r << 0, -1, 0,
       0, 0, -1,
       1, 0, 0;
  return r;
}

inline Eigen::Matrix3d intrinsics(double fx, double fy, double cx, double cy) {
  Eigen::Matrix3d k;
  k << fx, 0, cx,
       0, fy, cy,
       0, 0, 1;
  return k;
}

struct PixelHit {
  int u = 0;
  int v = 0;
  double camera_depth = 0.0;
};

/// Continuous image coordinates of a camera-frame point (no culling).
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> pinhole(const PinholeCamera<Scalar>& cam, const Eigen::Matrix<Scalar, 3, 1>& p_cam) {
  const Eigen::Matrix<Scalar, 3, 1> h = cam.K * p_cam;
  return h.template head<2>() / h.z();
}

/// K [R|t] applied to a LiDAR-frame point, rounded with floor(u + 0.5).
/// Empty when the point is too close, behind the camera, or off-image.
template <typename Scalar>
std::optional<PixelHit> project_point(const PinholeCamera<Scalar>& cam, const Eigen::Matrix<Scalar, 3, 1>& p_lidar) {
  const Eigen::Matrix<Scalar, 3, 1> p_cam = cam.R * p_lidar + cam.t;
  if (!(p_cam.z() > Scalar(kMinCameraDepth))) return std::nullopt;
  const Eigen::Matrix<Scalar, 2, 1> uv = pinhole(cam, p_cam);
  const Scalar u = std::floor(uv.x() + Scalar(0.5));
  const Scalar v = std::floor(uv.y() + Scalar(0.5));
  if (!(u >= 0 && v >= 0 && u < Scalar(cam.width) && v < Scalar(cam.height))) return std::nullopt;
  return PixelHit{static_cast<int>(u), static_cast<int>(v), static_cast<double>(p_cam.z())};
}

/// Per-pixel ego-forward distance in meters; 0 marks no data.
struct DepthMap {
  RowMajorMatrixX<double> pixels;
  Nanoseconds t = 0;
};

struct EventFrame {
  RowMajorMatrixX<std::int32_t> on_counts;
  RowMajorMatrixX<std::int32_t> off_counts;
  Nanoseconds t_start = 0;
  Nanoseconds t_end = 0;

  std::int64_t total() const {
    return on_counts.cast<std::int64_t>().sum() + off_counts.cast<std::int64_t>().sum();
  }
};

struct SteeringRecord {
  Nanoseconds t = 0;
  double angle_deg = 0.0;  // positive = left
};

struct SampleTriplet {
  std::shared_ptr<const DepthMap> depth_t1;
  std::shared_ptr<const DepthMap> depth_t2;
  /// Absent when events were not loaded (LiDAR-only pipelines).
  std::optional<EventFrame> event_frame;
  double target_deg = 0.0;
  Nanoseconds t1 = 0;
  Nanoseconds t2 = 0;
};

/// Counts events with t in [t1, t2) into on/off images.
EventFrame accumulate_events(const EventStream& stream, Nanoseconds t1, Nanoseconds t2, int width, int height);

/// Record minimizing |t - scan_t|; exact ties go to the earlier record.
const SteeringRecord& associate_steering(Nanoseconds scan_t, std::span<const SteeringRecord> records);

/// Renders one planar scan into the camera view. Collisions keep the nearest
/// (smallest ego-forward distance) return.
DepthMap project_scan(const LidarScan& scan, const CameraModel& cam);

/// Rotates the extrinsics by `deg` about `axis` (camera frame) and shifts the
/// translation by `shift`.
CameraModel rotate_extrinsics(const CameraModel& cam, const Eigen::Vector3d& axis, double deg,
                              const Eigen::Vector3d& shift);

/// Random miscalibration of exactly `rot_deg` and `trans_m`, deterministic per seed.
CameraModel perturb_extrinsics(const CameraModel& cam, double rot_deg, double trans_m, std::uint64_t seed);

/// Angle (degrees) of the relative rotation between two rotation matrices.
double rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

}  // namespace evfuse

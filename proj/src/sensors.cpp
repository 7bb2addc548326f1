#include "evfuse/sensors.hpp"

#include <algorithm>
#include <numbers>
#include <random>
#include <sstream>

namespace evfuse {

void validate_camera(const CameraModel& cam) {
  const double orth = (cam.R * cam.R.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (orth > 1e-9) throw CameraModelError("camera R is not orthonormal (max |RR^T - I| = " + std::to_string(orth) + ")");
  if (std::abs(cam.R.determinant() - 1.0) > 1e-9) throw CameraModelError("camera R must have determinant +1");
  if (!(cam.fx() > 0.0 && cam.fy() > 0.0)) throw CameraModelError("camera fx and fy must be positive");
  if (cam.K(0, 1) != 0.0 || cam.K(1, 0) != 0.0 || cam.K(2, 0) != 0.0 || cam.K(2, 1) != 0.0 || cam.K(2, 2) != 1.0) {
    throw CameraModelError("camera K must be a zero-skew intrinsic matrix");
  }
  if (cam.width <= 0 || cam.height <= 0) throw CameraModelError("camera image size must be positive");
  if (!cam.t.allFinite()) throw CameraModelError("camera translation must be finite");
}

EventFrame accumulate_events(const EventStream& stream, Nanoseconds t1, Nanoseconds t2, int width, int height) {
  if (t1 >= t2) {
    std::ostringstream os;
    os << "accumulate_events: empty window [" << t1 << ", " << t2 << ")";
    throw std::invalid_argument(os.str());
  }
  EventFrame frame;
  frame.on_counts = RowMajorMatrixX<std::int32_t>::Zero(height, width);
  frame.off_counts = RowMajorMatrixX<std::int32_t>::Zero(height, width);
  frame.t_start = t1;
  frame.t_end = t2;
  const auto& ev = stream.events;
  auto first = std::lower_bound(ev.begin(), ev.end(), t1, [](const Event& e, Nanoseconds t) { return e.t < t; });
  auto last = std::lower_bound(first, ev.end(), t2, [](const Event& e, Nanoseconds t) { return e.t < t; });
  for (auto it = first; it != last; ++it) {
    auto& counts = it->p > 0 ? frame.on_counts : frame.off_counts;
    counts(it->y, it->x) += 1;
  }
  return frame;
}

const SteeringRecord& associate_steering(Nanoseconds scan_t, std::span<const SteeringRecord> records) {
  if (records.empty()) throw std::invalid_argument("associate_steering: no steering records");
  auto it = std::lower_bound(records.begin(), records.end(), scan_t,
                             [](const SteeringRecord& r, Nanoseconds t) { return r.t < t; });
  if (it == records.begin()) return *it;
  if (it == records.end()) return records.back();
  const auto& before = *std::prev(it);
  const Nanoseconds gap_before = scan_t - before.t;
  const Nanoseconds gap_after = it->t - scan_t;
  return gap_before <= gap_after ? before : *it;
}

DepthMap project_scan(const LidarScan& scan, const CameraModel& cam) {
  validate_camera(cam);
  DepthMap map;
  map.t = scan.t;
  map.pixels = RowMajorMatrixX<double>::Zero(cam.height, cam.width);
  for (std::size_t i = 0; i < scan.ranges.size(); ++i) {
    const double r = scan.ranges[i];
    if (!std::isfinite(r) || r <= 0.0 || r > scan.range_max) continue;
    const double theta = scan.beam_angle(i);
    const Eigen::Vector3d p(r * std::cos(theta), r * std::sin(theta), 0.0);
    const double forward = p.x();
    if (!(forward > 0.0)) continue;
    const auto hit = project_point(cam, p);
    if (!hit) continue;
    double& px = map.pixels(hit->v, hit->u);
    if (px == 0.0 || forward < px) px = forward;
  }
  return map;
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double deg) {
  return Eigen::AngleAxisd(deg * std::numbers::pi / 180.0, axis.normalized()).toRotationMatrix();
}

CameraModel rotate_extrinsics(const CameraModel& cam, const Eigen::Vector3d& axis, double deg,
                              const Eigen::Vector3d& shift) {
  CameraModel out = cam;
  // Re-orthonormalize so repeated perturbation does not drift.
  const Eigen::Matrix3d r = axis_angle(axis, deg) * cam.R;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  out.R = svd.matrixU() * svd.matrixV().transpose();
  out.t = cam.t + shift;
  return out;
}

CameraModel perturb_extrinsics(const CameraModel& cam, double rot_deg, double trans_m, std::uint64_t seed) {
  if (rot_deg < 0.0 || trans_m < 0.0) throw std::invalid_argument("perturb_extrinsics: magnitudes must be >= 0");
  if (rot_deg == 0.0 && trans_m == 0.0) return cam;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto unit = [&] {
    Eigen::Vector3d v;
    do {
      v = Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
    } while (v.norm() < 1e-12);
    return Eigen::Vector3d(v.normalized());
  };
  const Eigen::Vector3d axis = unit();
  const Eigen::Vector3d dir = unit();
  return rotate_extrinsics(cam, axis, rot_deg, dir * trans_m);
}

double rotation_angle_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double c = std::clamp(((a * b.transpose()).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

}  // namespace evfuse

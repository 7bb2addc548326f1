#include "evfuse/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace evfuse::sim {

namespace {

constexpr double kPi = std::numbers::pi;

double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

Wall make_wall(std::vector<Eigen::Vector2d> pts) {
  Wall w;
  w.points = std::move(pts);
  w.arc_length.resize(w.points.size(), 0.0);
  for (std::size_t i = 1; i < w.points.size(); ++i) {
    w.arc_length[i] = w.arc_length[i - 1] + (w.points[i] - w.points[i - 1]).norm();
  }
  return w;
}

// Closed polylines list the first point again at the end; `count` excludes it.
std::size_t unique_count(const Track& t) {
  return t.closed ? t.centerline.size() - 1 : t.centerline.size();
}

Eigen::Vector2d tangent_at(const Track& t, std::size_t i) {
  const auto& c = t.centerline;
  const std::size_t n = unique_count(t);
  Eigen::Vector2d d;
  if (t.closed) {
    d = c[(i + 1) % n] - c[(i + n - 1) % n];
  } else if (i == 0) {
    d = c[1] - c[0];
  } else if (i + 1 >= c.size()) {
    d = c[i] - c[i - 1];
  } else {
    d = c[i + 1] - c[i - 1];
  }
  return d.normalized();
}

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  const Wall* wall = nullptr;
  std::size_t segment = 0;
  double s = 0.0;
};

// Nearest wall crossing of origin + t * dir, t > 0.
RayHit cast_ray(const Track& track, const Eigen::Vector2d& origin, const Eigen::Vector2d& dir) {
  RayHit best;
  for (const auto& wall : track.walls) {
    for (std::size_t i = 0; i + 1 < wall.points.size(); ++i) {
      const Eigen::Vector2d e = wall.points[i + 1] - wall.points[i];
      const double denom = cross2(dir, e);
      if (std::abs(denom) < 1e-15) continue;
      const Eigen::Vector2d w = wall.points[i] - origin;
      const double t = cross2(w, e) / denom;
      if (!(t > 1e-9) || t >= best.t) continue;
      const double s = cross2(w, dir) / denom;
      if (s < 0.0 || s > 1.0) continue;
      best = {t, &wall, i, s};
    }
  }
  return best;
}

std::vector<Eigen::Vector2d> resample_closed(const std::vector<Eigen::Vector2d>& dense, double spacing) {
  std::vector<double> acc(dense.size(), 0.0);
  for (std::size_t i = 1; i < dense.size(); ++i) acc[i] = acc[i - 1] + (dense[i] - dense[i - 1]).norm();
  const double total = acc.back();
  const auto count = static_cast<std::size_t>(std::max(8.0, std::round(total / spacing)));
  const double step = total / static_cast<double>(count);
  std::vector<Eigen::Vector2d> out;
  out.reserve(count + 1);
  std::size_t j = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const double target = step * static_cast<double>(k);
    while (j + 1 < dense.size() - 1 && acc[j + 1] < target) ++j;
    const double seg = acc[j + 1] - acc[j];
    const double f = seg > 0 ? (target - acc[j]) / seg : 0.0;
    out.push_back(dense[j] + f * (dense[j + 1] - dense[j]));
  }
  out.push_back(out.front());
  return out;
}

bool track_is_valid(const Track& t, const TrackConfig& cfg) {
  if (cfg.half_width <= cfg.vehicle_width) return false;
  const auto kappa = centerline_curvature(t);
  // Margin keeps any reasonable curvature estimator under the configured bound.
  const double bound = 0.9 / cfg.min_radius;
  for (double k : kappa) {
    if (std::abs(k) > bound) return false;
  }
  // Points far apart along the loop must stay far apart in space, so the
  // corridor never overlaps itself.
  const std::size_t n = unique_count(t);
  const double spacing = (t.centerline[1] - t.centerline[0]).norm();
  const auto skip = static_cast<std::size_t>(std::ceil(kPi * cfg.half_width * 1.5 / spacing));
  const double clearance = 2.0 * cfg.half_width + 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + skip; j < n; ++j) {
      if (n - j + i < skip) break;
      if ((t.centerline[i] - t.centerline[j]).squaredNorm() < clearance * clearance) return false;
    }
  }
  return true;
}

}  // namespace

Track Track::from_centerline(std::vector<Eigen::Vector2d> centerline, double half_width, double stripe_period,
                             bool closed) {
  if (centerline.size() < 2) throw std::invalid_argument("track centerline needs at least 2 points");
  Track t;
  t.centerline = std::move(centerline);
  t.closed = closed;
  t.half_width = half_width;
  t.stripe_period = stripe_period;
  if (closed && (t.centerline.front() - t.centerline.back()).norm() > 1e-12) t.centerline.push_back(t.centerline.front());
  std::vector<Eigen::Vector2d> left, right;
  const std::size_t n = unique_count(t);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d tan = tangent_at(t, i);
    const Eigen::Vector2d normal(-tan.y(), tan.x());
    left.push_back(t.centerline[i] + half_width * normal);
    right.push_back(t.centerline[i] - half_width * normal);
  }
  if (closed) {
    left.push_back(left.front());
    right.push_back(right.front());
  }
  t.walls.push_back(make_wall(std::move(left)));
  t.walls.push_back(make_wall(std::move(right)));
  return t;
}

Track Track::mirrored() const {
  Track m = *this;
  for (auto& p : m.centerline) p.y() = -p.y();
  for (auto& w : m.walls) {
    for (auto& p : w.points) p.y() = -p.y();
  }
  return m;
}

Track generate_track(std::uint64_t seed, const TrackConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const int k = cfg.control_points;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    // Control radii at evenly spaced angles, joined by a periodic C2 cubic
    // spline r(angle).
    Eigen::VectorXd radius(k);
    for (int i = 0; i < k; ++i) radius[i] = 1.0 + cfg.control_jitter * unit(rng);
    const double h = 2.0 * kPi / k;
    Eigen::MatrixXd system = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd rhs(k);
    for (int i = 0; i < k; ++i) {
      system(i, (i + k - 1) % k) += 1.0;
      system(i, i) += 4.0;
      system(i, (i + 1) % k) += 1.0;
      rhs[i] = 6.0 / (h * h) * (radius[(i + 1) % k] - 2.0 * radius[i] + radius[(i + k - 1) % k]);
    }
    const Eigen::VectorXd second = system.partialPivLu().solve(rhs);
    std::vector<Eigen::Vector2d> dense;
    constexpr int kSamples = 512;
    for (int i = 0; i < k; ++i) {
      const int j = (i + 1) % k;
      for (int q = 0; q < kSamples; ++q) {
        const double s = static_cast<double>(q) / kSamples;
        const double r = (1.0 - s) * radius[i] + s * radius[j] +
                         h * h / 6.0 * ((std::pow(1.0 - s, 3) - (1.0 - s)) * second[i] + (s * s * s - s) * second[j]);
        const double angle = h * (i + s);
        dense.emplace_back(r * std::cos(angle), r * std::sin(angle));
      }
    }
    dense.push_back(dense.front());
    Eigen::Vector2d lo = dense.front(), hi = dense.front();
    for (const auto& p : dense) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Eigen::Vector2d mid = 0.5 * (lo + hi);
    const Eigen::Vector2d scale(cfg.box_x / (hi.x() - lo.x()), cfg.box_y / (hi.y() - lo.y()));
    for (auto& p : dense) p = (p - mid).cwiseProduct(scale);
    auto centerline = resample_closed(dense, cfg.waypoint_spacing);
    // Half of the loops run clockwise so both turn directions appear.
    if (unit(rng) < 0.0) std::reverse(centerline.begin(), centerline.end());
    Track t = Track::from_centerline(std::move(centerline), cfg.half_width, cfg.stripe_period, true);
    if (track_is_valid(t, cfg)) return t;
  }
  throw std::runtime_error("generate_track: no valid track after max_attempts; loosen the track config");
}

Track circle_track(double radius, int waypoints, double half_width, double stripe_period) {
  std::vector<Eigen::Vector2d> pts;
  for (int i = 0; i < waypoints; ++i) {
    const double a = 2.0 * kPi * i / waypoints;
    pts.emplace_back(radius * std::cos(a), radius * std::sin(a));
  }
  return Track::from_centerline(std::move(pts), half_width, stripe_period, true);
}

std::vector<double> centerline_curvature(const Track& t) {
  const std::size_t n = unique_count(t);
  std::vector<double> kappa(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!t.closed && (i == 0 || i + 1 == n)) continue;
    const auto& a = t.centerline[(i + n - 1) % n];
    const auto& b = t.centerline[i];
    const auto& c = t.centerline[(i + 1) % n];
    const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
    const double area2 = cross2(b - a, c - a);
    kappa[i] = 2.0 * area2 / (ab * bc * ca);
  }
  return kappa;
}

namespace {

std::size_t nearest_index(const Track& t, const Eigen::Vector2d& p) {
  const std::size_t n = unique_count(t);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (t.centerline[i] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

}  // namespace

Eigen::Vector2d lookahead_point(const Track& track, const VehicleState& state, double lookahead) {
  const auto& c = track.centerline;
  const std::size_t n = unique_count(track);
  const std::size_t start = nearest_index(track, state.position);
  if ((c[start] - state.position).norm() >= lookahead) return c[start];
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t i = track.closed ? (start + step) % n : start + step;
    if (!track.closed && i + 1 >= c.size()) break;
    const Eigen::Vector2d& a = c[i];
    const Eigen::Vector2d& b = c[i + 1];
    if ((b - state.position).norm() < lookahead) continue;
    // Far root of |a + s(b - a) - p| = lookahead.
    const Eigen::Vector2d d = b - a, f = a - state.position;
    const double qa = d.squaredNorm(), qb = 2.0 * f.dot(d), qc = f.squaredNorm() - lookahead * lookahead;
    const double disc = std::max(0.0, qb * qb - 4.0 * qa * qc);
    const double s = std::clamp((-qb + std::sqrt(disc)) / (2.0 * qa), 0.0, 1.0);
    return a + s * d;
  }
  return c.back();
}

double pure_pursuit_deg(const Track& track, const VehicleState& state, double lookahead, double limit_deg) {
  const Eigen::Vector2d target = lookahead_point(track, state, lookahead);
  const Eigen::Vector2d rel = target - state.position;
  const double ch = std::cos(state.heading), sh = std::sin(state.heading);
  const Eigen::Vector2d local(ch * rel.x() + sh * rel.y(), -sh * rel.x() + ch * rel.y());
  const double dist = local.norm();
  if (dist < 1e-12) return 0.0;
  const double alpha = std::atan2(local.y(), local.x());
  const double delta = std::atan(2.0 * state.wheelbase * std::sin(alpha) / dist) * 180.0 / kPi;
  return std::clamp(delta, -limit_deg, limit_deg);
}

VehicleState drive(const Track& track, const VehicleState& state, double dt, double lookahead, double limit_deg) {
  VehicleState next = state;
  const double delta_deg = pure_pursuit_deg(track, state, lookahead, limit_deg);
  const double delta = delta_deg * kPi / 180.0;
  next.position.x() += state.speed * std::cos(state.heading) * dt;
  next.position.y() += state.speed * std::sin(state.heading) * dt;
  next.heading += state.speed / state.wheelbase * std::tan(delta) * dt;
  next.steering_deg = delta_deg;
  return next;
}

CameraModel true_camera(const SimConfig& cfg) {
  CameraModel cam;
  cam.K = intrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy);
  cam.R = lidar_to_camera_axes();
  const Eigen::Vector3d center(0.0, 0.0, cfg.camera_height);  // in the LiDAR frame
  cam.t = -cam.R * center;
  cam.width = cfg.width;
  cam.height = cfg.height;
  return cam;
}

LidarScan render_lidar(const Track& track, const VehicleState& state, const SimConfig& cfg, std::mt19937_64& rng) {
  LidarScan scan;
  const double fov = cfg.fov_deg * kPi / 180.0;
  scan.angle_min = -fov / 2.0;
  scan.angle_increment = cfg.beam_count > 1 ? fov / (cfg.beam_count - 1) : 0.0;
  scan.range_max = cfg.range_max;
  scan.ranges.resize(static_cast<std::size_t>(cfg.beam_count), kNoReturn);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < cfg.beam_count; ++i) {
    const double a = state.heading + scan.beam_angle(static_cast<std::size_t>(i));
    const RayHit hit = cast_ray(track, state.position, {std::cos(a), std::sin(a)});
    // Noise is drawn for every beam so the stream stays aligned across scans.
    const double eps = cfg.lidar_noise_sigma * noise(rng);
    if (hit.t <= cfg.range_max) {
      scan.ranges[static_cast<std::size_t>(i)] = std::clamp(hit.t + eps, 1e-3, cfg.range_max);
    }
  }
  return scan;
}

RowMajorMatrixX<double> render_intensity(const Track& track, const VehicleState& state, const SimConfig& cfg,
                                         const CameraModel& camera) {
  const double log_bright = std::log(cfg.intensity_bright);
  const double log_dark = std::log(cfg.intensity_dark);
  const double log_bg = std::log(cfg.intensity_background);
  RowMajorMatrixX<double> img(camera.height, camera.width);

  const Eigen::Matrix3d k_inv = camera.K.inverse();
  const Eigen::Matrix3d rt = camera.R.transpose();
  const Eigen::Vector3d center_lidar = -rt * camera.t;
  const double ch = std::cos(state.heading), sh = std::sin(state.heading);
  const Eigen::Vector2d origin(state.position.x() + ch * center_lidar.x() - sh * center_lidar.y(),
                               state.position.y() + sh * center_lidar.x() + ch * center_lidar.y());
  const double origin_z = cfg.lidar_height + center_lidar.z();

  Eigen::Vector2d cached_dir(0.0, 0.0);
  RayHit cached;
  for (int u = 0; u < camera.width; ++u) {
    for (int v = 0; v < camera.height; ++v) {
      const Eigen::Vector3d d_lidar = rt * (k_inv * Eigen::Vector3d(u, v, 1.0));
      const Eigen::Vector2d d_world(ch * d_lidar.x() - sh * d_lidar.y(), sh * d_lidar.x() + ch * d_lidar.y());
      const double horiz = d_world.norm();
      double value = log_bg;
      if (horiz > 1e-12) {
        const Eigen::Vector2d dir = d_world / horiz;
        // Level cameras share one horizontal ray per column.
        if (dir != cached_dir) {
          cached = cast_ray(track, origin, dir);
          cached_dir = dir;
        }
        if (std::isfinite(cached.t)) {
          const double z = origin_z + cached.t * d_lidar.z() / horiz;
          if (z >= 0.0 && z <= cfg.wall_height) {
            const Wall& w = *cached.wall;
            const double pos = w.arc_length[cached.segment] +
                               cached.s * (w.arc_length[cached.segment + 1] - w.arc_length[cached.segment]);
            const auto band = static_cast<long long>(std::floor(pos / (0.5 * track.stripe_period)));
            value = (band % 2 == 0) ? log_bright : log_dark;
          }
        }
      }
      img(v, u) = value;
    }
  }
  return img;
}

EventStream synthesize_events(const RowMajorMatrixX<double>& img_t1, const RowMajorMatrixX<double>& img_t2,
                              Nanoseconds t1, Nanoseconds t2, double threshold, double noise_rate,
                              std::mt19937_64& rng) {
  if (!(threshold > 0.0)) throw std::invalid_argument("synthesize_events: threshold must be positive");
  if (t2 <= t1 + 1) throw std::invalid_argument("synthesize_events: window too short");
  if (img_t1.rows() != img_t2.rows() || img_t1.cols() != img_t2.cols()) {
    throw std::invalid_argument("synthesize_events: image sizes differ");
  }
  EventStream stream;
  stream.t_start = t1;
  stream.t_end = t2;
  const Nanoseconds span = t2 - t1;
  for (Eigen::Index y = 0; y < img_t1.rows(); ++y) {
    for (Eigen::Index x = 0; x < img_t1.cols(); ++x) {
      const double delta = img_t2(y, x) - img_t1(y, x);
      const auto n = static_cast<Nanoseconds>(std::floor(std::abs(delta) / threshold));
      const std::int8_t p = delta > 0 ? 1 : -1;
      for (Nanoseconds k = 0; k < n; ++k) {
        const Nanoseconds t = t1 + (k + 1) * span / (n + 1);
        stream.events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), t, p});
      }
    }
  }
  if (noise_rate > 0.0) {
    std::poisson_distribution<long> count(noise_rate * static_cast<double>(img_t1.size()));
    std::uniform_int_distribution<Eigen::Index> px(0, img_t1.cols() - 1), py(0, img_t1.rows() - 1);
    std::uniform_int_distribution<Nanoseconds> pt(t1 + 1, t2 - 1);
    std::bernoulli_distribution pol(0.5);
    const long noise = count(rng);
    for (long i = 0; i < noise; ++i) {
      const auto x = px(rng), y = py(rng);
      const auto t = pt(rng);
      const std::int8_t p = pol(rng) ? 1 : -1;
      stream.events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), t, p});
    }
  }
  std::sort(stream.events.begin(), stream.events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.t, a.y, a.x, a.p) < std::tie(b.t, b.y, b.x, b.p);
  });
  return stream;
}

SimulationTrace simulate_on(const Track& track, const VehicleState& start, const SimConfig& cfg) {
  if (!(cfg.lidar_hz > 0.0)) throw std::invalid_argument("lidar_hz must be positive");
  if (cfg.physics_substeps < 1) throw std::invalid_argument("physics_substeps must be >= 1");
  const auto period_ns = static_cast<Nanoseconds>(std::llround(1e9 / cfg.lidar_hz));
  const Nanoseconds step_ns = period_ns / static_cast<Nanoseconds>(cfg.physics_substeps);
  const auto scans = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.lidar_hz));
  if (scans < 1) throw std::invalid_argument("duration too short for a single scan");

  SimulationTrace trace;
  trace.track = track;
  Bag& bag = trace.bag;
  const CameraModel truth = true_camera(cfg);
  bag.meta.sensor_width = cfg.width;
  bag.meta.sensor_height = cfg.height;
  bag.meta.beam_count = cfg.beam_count;
  bag.meta.range_max = cfg.range_max;
  bag.meta.steering_limit_deg = cfg.steering_limit_deg;
  bag.meta.camera = truth;
  if (cfg.extrinsic_error_deg > 0.0 || cfg.extrinsic_error_m > 0.0) {
    bag.meta.camera = perturb_extrinsics(truth, cfg.extrinsic_error_deg, cfg.extrinsic_error_m, cfg.seed ^ 0x5eedcafeULL);
    bag.meta.true_camera = truth;
  }

  std::mt19937_64 lidar_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 event_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 2);

  VehicleState state = start;
  RowMajorMatrixX<double> previous_image;
  const std::size_t steps = (scans - 1) * static_cast<std::size_t>(cfg.physics_substeps);
  for (std::size_t j = 0; j <= steps; ++j) {
    const Nanoseconds t = cfg.start_time_ns + j * step_ns;
    const VehicleState next = drive(track, state, static_cast<double>(step_ns) * 1e-9, cfg.lookahead,
                                    cfg.steering_limit_deg);
    state.steering_deg = next.steering_deg;
    bag.steering.push_back({t, next.steering_deg});
    if (j % static_cast<std::size_t>(cfg.physics_substeps) == 0) {
      LidarScan scan = render_lidar(track, state, cfg, lidar_rng);
      scan.t = t;
      if (bag.scans.empty()) {
        bag.meta.angle_min = scan.angle_min;
        bag.meta.angle_increment = scan.angle_increment;
      }
      bag.scans.push_back(std::move(scan));
      trace.scan_states.push_back(state);
      RowMajorMatrixX<double> image = render_intensity(track, state, cfg, truth);
      if (previous_image.size() > 0) {
        EventStream chunk = synthesize_events(previous_image, image, t - period_ns, t, cfg.event_threshold,
                                              cfg.event_noise_rate, event_rng);
        bag.events.events.insert(bag.events.events.end(), chunk.events.begin(), chunk.events.end());
      }
      previous_image = std::move(image);
    }
    state = next;
  }
  bag.events.t_start = bag.scans.front().t;
  bag.events.t_end = bag.scans.back().t;
  return trace;
}

SimulationTrace simulate(const SimConfig& cfg) {
  Track track = generate_track(cfg.seed, cfg.track);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 3);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  VehicleState start;
  const Eigen::Vector2d tan = (track.centerline[1] - track.centerline[0]).normalized();
  const Eigen::Vector2d normal(-tan.y(), tan.x());
  start.position = track.centerline[0] + cfg.start_offset_max * unit(rng) * normal;
  start.heading = std::atan2(tan.y(), tan.x());
  start.speed = cfg.speed;
  start.wheelbase = cfg.wheelbase;
  return simulate_on(track, start, cfg);
}

Bag generate_bag(const SimConfig& cfg, const std::filesystem::path& dir, const std::string& config_hash) {
  SimulationTrace trace = simulate(cfg);
  trace.bag.meta.config_hash = config_hash;
  write_bag(dir, trace.bag);
  return std::move(trace.bag);
}

}  // namespace evfuse::sim

#include "evfuse/bag.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string_view>

namespace evfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
bool parse_number(std::string_view field, T& out) {
  if constexpr (std::is_floating_point_v<T>) {
    if (field == "inf") {
      out = std::numeric_limits<T>::infinity();
      return true;
    }
  }
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::string_view chomp(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

void append_double(std::string& out, double v) {
  if (std::isinf(v) && v > 0) {
    out += "inf";
    return;
  }
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

template <typename T>
void append_int(std::string& out, T v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

std::vector<double> matrix_row_major(const Eigen::MatrixXd& m) {
  std::vector<double> v;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  return v;
}

Eigen::Matrix3d matrix3_from(const json& j, const char* key) {
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 9) throw BagFormatError(std::string("meta.json: ") + key + " must have 9 entries");
  Eigen::Matrix3d m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = v[static_cast<std::size_t>(i)];
  return m;
}

Eigen::Vector3d vector3_from(const json& j, const char* key) {
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw BagFormatError(std::string("meta.json: ") + key + " must have 3 entries");
  return {v[0], v[1], v[2]};
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BagFormatError("cannot open " + path.string());
  return in;
}

std::string lidar_header(int beams) {
  std::string h = "t_ns";
  for (int i = 0; i < beams; ++i) h += ",r" + std::to_string(i);
  return h;
}

json meta_to_json(const BagMeta& m) {
  json j;
  j["schema_version"] = m.schema_version;
  j["sensor_width"] = m.sensor_width;
  j["sensor_height"] = m.sensor_height;
  j["K"] = matrix_row_major(m.camera.K);
  j["R"] = matrix_row_major(m.camera.R);
  j["t_vec"] = std::vector<double>{m.camera.t.x(), m.camera.t.y(), m.camera.t.z()};
  j["beam_count"] = m.beam_count;
  j["angle_min"] = m.angle_min;
  j["angle_increment"] = m.angle_increment;
  j["range_max"] = m.range_max;
  j["steering_limit_deg"] = m.steering_limit_deg;
  if (m.true_camera) {
    j["true_extrinsics"] = {{"R", matrix_row_major(m.true_camera->R)},
                            {"t_vec", std::vector<double>{m.true_camera->t.x(), m.true_camera->t.y(),
                                                          m.true_camera->t.z()}}};
  }
  if (!m.config_hash.empty()) j["config_hash"] = m.config_hash;
  return j;
}

BagMeta meta_from_json(const json& j) {
  BagMeta m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    m.sensor_width = j.at("sensor_width").get<int>();
    m.sensor_height = j.at("sensor_height").get<int>();
    m.camera.K = matrix3_from(j, "K");
    m.camera.R = matrix3_from(j, "R");
    m.camera.t = vector3_from(j, "t_vec");
    m.camera.width = m.sensor_width;
    m.camera.height = m.sensor_height;
    m.beam_count = j.at("beam_count").get<int>();
    m.angle_min = j.at("angle_min").get<double>();
    m.angle_increment = j.at("angle_increment").get<double>();
    m.range_max = j.at("range_max").get<double>();
    m.steering_limit_deg = j.at("steering_limit_deg").get<double>();
    if (j.contains("true_extrinsics")) {
      CameraModel truth = m.camera;
      truth.R = matrix3_from(j.at("true_extrinsics"), "R");
      truth.t = vector3_from(j.at("true_extrinsics"), "t_vec");
      m.true_camera = truth;
    }
    if (j.contains("config_hash")) m.config_hash = j.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw BagFormatError(std::string("meta.json: ") + e.what());
  }
  if (m.schema_version != kBagSchemaVersion) {
    throw BagFormatError("meta.json: unsupported schema_version " + std::to_string(m.schema_version));
  }
  return m;
}

[[noreturn]] void parse_fail(const fs::path& file, std::size_t line, const std::string& what) {
  throw BagFormatError(file.filename().string() + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

BagMeta read_meta(const fs::path& dir) {
  auto in = open_input(dir / "meta.json");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw BagFormatError(std::string("meta.json: ") + e.what());
  }
  return meta_from_json(j);
}

Bag load_bag(const fs::path& dir, const BagLoadOptions& options) {
  Bag bag;
  bag.meta = read_meta(dir);
  const auto& meta = bag.meta;

  {
    const fs::path file = dir / "lidar.csv";
    auto in = open_input(file);
    std::string line;
    std::getline(in, line);
    if (chomp(line) != lidar_header(meta.beam_count)) parse_fail(file, 1, "unexpected header");
    std::size_t ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      const auto text = chomp(line);
      if (text.empty()) continue;
      const auto fields = split_csv(text);
      if (fields.size() != static_cast<std::size_t>(meta.beam_count) + 1) parse_fail(file, ln, "wrong field count");
      LidarScan scan;
      scan.angle_min = meta.angle_min;
      scan.angle_increment = meta.angle_increment;
      scan.range_max = meta.range_max;
      if (!parse_number(fields[0], scan.t)) parse_fail(file, ln, "bad timestamp");
      scan.ranges.resize(static_cast<std::size_t>(meta.beam_count));
      for (std::size_t i = 1; i < fields.size(); ++i) {
        if (!parse_number(fields[i], scan.ranges[i - 1])) parse_fail(file, ln, "bad range");
      }
      bag.scans.push_back(std::move(scan));
    }
  }
  {
    const fs::path file = dir / "steering.csv";
    auto in = open_input(file);
    std::string line;
    std::getline(in, line);
    if (chomp(line) != "t_ns,angle_deg") parse_fail(file, 1, "unexpected header");
    std::size_t ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      const auto text = chomp(line);
      if (text.empty()) continue;
      const auto fields = split_csv(text);
      SteeringRecord rec;
      if (fields.size() != 2 || !parse_number(fields[0], rec.t) || !parse_number(fields[1], rec.angle_deg)) {
        parse_fail(file, ln, "malformed row");
      }
      bag.steering.push_back(rec);
    }
  }
  if (options.load_events) {
    const fs::path file = dir / "events.csv";
    auto in = open_input(file);
    std::string line;
    std::getline(in, line);
    if (chomp(line) != "t_ns,x,y,p") parse_fail(file, 1, "unexpected header");
    std::size_t ln = 1;
    while (std::getline(in, line)) {
      ++ln;
      const auto text = chomp(line);
      if (text.empty()) continue;
      const auto fields = split_csv(text);
      Event e;
      int p = 0;
      if (fields.size() != 4 || !parse_number(fields[0], e.t) || !parse_number(fields[1], e.x) ||
          !parse_number(fields[2], e.y) || !parse_number(fields[3], p)) {
        parse_fail(file, ln, "malformed row");
      }
      if (e.x >= meta.sensor_width || e.y >= meta.sensor_height) parse_fail(file, ln, "event outside the sensor");
      if (p != 1 && p != -1) parse_fail(file, ln, "polarity must be 1 or -1");
      e.p = static_cast<std::int8_t>(p);
      bag.events.events.push_back(e);
    }
  }
  bag.events_loaded = options.load_events;
  const auto& ev = bag.events.events;
  if (!bag.scans.empty()) {
    bag.events.t_start = ev.empty() ? bag.scans.front().t : std::min(ev.front().t, bag.scans.front().t);
    bag.events.t_end = ev.empty() ? bag.scans.back().t : std::max(ev.back().t, bag.scans.back().t);
  }
  return bag;
}

void write_bag(const fs::path& dir, const Bag& bag) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "meta.json", std::ios::binary);
    out << meta_to_json(bag.meta).dump(2) << '\n';
  }
  {
    std::string buf = "t_ns,x,y,p\n";
    buf.reserve(bag.events.events.size() * 28 + 16);
    for (const auto& e : bag.events.events) {
      append_int(buf, e.t);
      buf += ',';
      append_int(buf, e.x);
      buf += ',';
      append_int(buf, e.y);
      buf += e.p > 0 ? ",1\n" : ",-1\n";
    }
    std::ofstream(dir / "events.csv", std::ios::binary) << buf;
  }
  {
    std::string buf = lidar_header(bag.meta.beam_count) + "\n";
    for (const auto& s : bag.scans) {
      append_int(buf, s.t);
      for (double r : s.ranges) {
        buf += ',';
        append_double(buf, r);
      }
      buf += '\n';
    }
    std::ofstream(dir / "lidar.csv", std::ios::binary) << buf;
  }
  {
    std::string buf = "t_ns,angle_deg\n";
    for (const auto& r : bag.steering) {
      append_int(buf, r.t);
      buf += ',';
      append_double(buf, r.angle_deg);
      buf += '\n';
    }
    std::ofstream(dir / "steering.csv", std::ios::binary) << buf;
  }
}

ValidationReport validate_bag(const fs::path& dir) {
  ValidationReport report;
  auto add = [&](std::string file, std::size_t line, std::string kind, std::string message) {
    report.findings.push_back({std::move(file), line, std::move(kind), std::move(message)});
  };

  BagMeta meta;
  try {
    meta = read_meta(dir);
    validate_camera(meta.camera);
  } catch (const std::exception& e) {
    add("meta.json", 0, "schema", e.what());
    return report;
  }

  std::vector<Nanoseconds> scan_times;
  {
    std::ifstream in(dir / "lidar.csv", std::ios::binary);
    std::string line;
    if (!in || !std::getline(in, line) || chomp(line) != lidar_header(meta.beam_count)) {
      add("lidar.csv", 1, "schema", "missing file or header does not match beam_count");
    } else {
      std::size_t ln = 1;
      std::optional<Nanoseconds> prev;
      while (std::getline(in, line)) {
        ++ln;
        const auto text = chomp(line);
        if (text.empty()) continue;
        const auto fields = split_csv(text);
        Nanoseconds t = 0;
        if (fields.size() != static_cast<std::size_t>(meta.beam_count) + 1 || !parse_number(fields[0], t)) {
          add("lidar.csv", ln, "schema", "malformed scan row");
          continue;
        }
        ++report.scan_count;
        if (prev && t <= *prev) add("lidar.csv", ln, "non_monotone", "scan timestamp does not increase");
        prev = t;
        scan_times.push_back(t);
        for (std::size_t i = 1; i < fields.size(); ++i) {
          double r = 0.0;
          if (!parse_number(fields[i], r) || std::isnan(r) || r <= 0.0 || (std::isfinite(r) && r > meta.range_max)) {
            add("lidar.csv", ln, "out_of_range", "beam " + std::to_string(i - 1) + " range invalid");
            break;
          }
        }
      }
    }
  }

  std::vector<Nanoseconds> steer_times;
  {
    std::ifstream in(dir / "steering.csv", std::ios::binary);
    std::string line;
    if (!in || !std::getline(in, line) || chomp(line) != "t_ns,angle_deg") {
      add("steering.csv", 1, "schema", "missing file or unexpected header");
    } else {
      std::size_t ln = 1;
      std::optional<Nanoseconds> prev;
      while (std::getline(in, line)) {
        ++ln;
        const auto text = chomp(line);
        if (text.empty()) continue;
        const auto fields = split_csv(text);
        SteeringRecord rec;
        if (fields.size() != 2 || !parse_number(fields[0], rec.t) || !parse_number(fields[1], rec.angle_deg)) {
          add("steering.csv", ln, "schema", "malformed steering row");
          continue;
        }
        ++report.steering_count;
        if (prev && rec.t < *prev) add("steering.csv", ln, "non_monotone", "steering timestamp decreases");
        prev = rec.t;
        steer_times.push_back(rec.t);
        if (!std::isfinite(rec.angle_deg) || std::abs(rec.angle_deg) > meta.steering_limit_deg) {
          add("steering.csv", ln, "out_of_range", "steering angle beyond the mechanical limit");
        }
      }
    }
  }

  {
    std::ifstream in(dir / "events.csv", std::ios::binary);
    std::string line;
    if (!in || !std::getline(in, line) || chomp(line) != "t_ns,x,y,p") {
      add("events.csv", 1, "schema", "missing file or unexpected header");
    } else {
      std::size_t ln = 1;
      std::optional<Nanoseconds> prev;
      while (std::getline(in, line)) {
        ++ln;
        const auto text = chomp(line);
        if (text.empty()) continue;
        const auto fields = split_csv(text);
        Nanoseconds t = 0;
        long x = 0, y = 0;
        int p = 0;
        if (fields.size() != 4 || !parse_number(fields[0], t) || !parse_number(fields[1], x) ||
            !parse_number(fields[2], y) || !parse_number(fields[3], p)) {
          add("events.csv", ln, "schema", "malformed event row");
          continue;
        }
        ++report.event_count;
        if (prev && t < *prev) add("events.csv", ln, "non_monotone", "event timestamp decreases");
        prev = t;
        if (x < 0 || y < 0 || x >= meta.sensor_width || y >= meta.sensor_height || (p != 1 && p != -1)) {
          add("events.csv", ln, "out_of_range", "event coordinates or polarity invalid");
        }
      }
    }
  }

  if (!steer_times.empty() && !scan_times.empty()) {
    const auto [lo, hi] = std::minmax_element(steer_times.begin(), steer_times.end());
    const auto lead_in = std::count_if(scan_times.begin(), scan_times.end(), [&](auto t) { return t < *lo; });
    const auto lead_out = std::count_if(scan_times.begin(), scan_times.end(), [&](auto t) { return t > *hi; });
    if (lead_in > 0) add("lidar.csv", 2, "lead_in", std::to_string(lead_in) + " scans before the first steering record");
    if (lead_out > 0) {
      add("lidar.csv", scan_times.size() + 1 - static_cast<std::size_t>(lead_out), "lead_out",
          std::to_string(lead_out) + " scans after the last steering record");
    }
  } else if (steer_times.empty()) {
    add("steering.csv", 0, "schema", "no steering records");
  }
  if (scan_times.size() < 2) add("lidar.csv", 0, "schema", "fewer than 2 scans");
  return report;
}

std::size_t trim_bag(Bag& bag) {
  if (bag.steering.empty()) return 0;
  const Nanoseconds first = bag.steering.front().t, last = bag.steering.back().t;
  const std::size_t before = bag.scans.size();
  std::erase_if(bag.scans, [&](const LidarScan& s) { return s.t < first || s.t > last; });
  return before - bag.scans.size();
}

std::vector<SampleTriplet> build_triplets(const Bag& bag) {
  if (bag.scans.size() < 2) throw BagFormatError("build_triplets: need at least 2 scans");
  if (bag.steering.empty()) throw BagFormatError("build_triplets: no steering records");
  validate_camera(bag.meta.camera);
  for (std::size_t i = 0; i < bag.scans.size(); ++i) {
    if (bag.scans[i].ranges.size() != static_cast<std::size_t>(bag.meta.beam_count)) {
      throw BagFormatError("build_triplets: scan " + std::to_string(i) + " beam count differs from meta");
    }
    if (i > 0 && bag.scans[i].t <= bag.scans[i - 1].t) {
      throw BagFormatError("build_triplets: scan timestamps not increasing at scan " + std::to_string(i));
    }
  }
  for (std::size_t i = 1; i < bag.steering.size(); ++i) {
    if (bag.steering[i].t < bag.steering[i - 1].t) throw BagFormatError("build_triplets: steering not time-ordered");
  }
  const auto& ev = bag.events.events;
  for (std::size_t i = 1; i < ev.size(); ++i) {
    if (ev[i].t < ev[i - 1].t) throw BagFormatError("build_triplets: events not time-ordered");
  }

  std::vector<std::shared_ptr<const DepthMap>> depth;
  depth.reserve(bag.scans.size());
  for (const auto& s : bag.scans) depth.push_back(std::make_shared<const DepthMap>(project_scan(s, bag.meta.camera)));

  std::vector<SampleTriplet> out;
  out.reserve(bag.scans.size() - 1);
  for (std::size_t i = 0; i + 1 < bag.scans.size(); ++i) {
    SampleTriplet tr;
    tr.t1 = bag.scans[i].t;
    tr.t2 = bag.scans[i + 1].t;
    tr.depth_t1 = depth[i];
    tr.depth_t2 = depth[i + 1];
    if (bag.events_loaded) {
      tr.event_frame = accumulate_events(bag.events, tr.t1, tr.t2, bag.meta.sensor_width, bag.meta.sensor_height);
    }
    tr.target_deg = associate_steering(tr.t2, bag.steering).angle_deg;
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace evfuse

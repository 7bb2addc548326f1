#include "evfuse/config.hpp"

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace evfuse {

namespace {

using nlohmann::json;

// Single list of every configurable field. Each visitor is called as
// v(section, key, field) where section may be nested ("sim.track").
template <class Cfg, class V>
void visit_fields(Cfg& c, V&& v) {
  v("", "seed", c.seed);

  v("data", "train_bags", c.data.train_bags);
  v("data", "test_bags", c.data.test_bags);

  auto& s = c.sim;
  v("sim", "duration_s", s.duration_s);
  v("sim", "lidar_hz", s.lidar_hz);
  v("sim", "physics_substeps", s.physics_substeps);
  v("sim", "beam_count", s.beam_count);
  v("sim", "fov_deg", s.fov_deg);
  v("sim", "range_max", s.range_max);
  v("sim", "width", s.width);
  v("sim", "height", s.height);
  v("sim", "fx", s.fx);
  v("sim", "fy", s.fy);
  v("sim", "cx", s.cx);
  v("sim", "cy", s.cy);
  v("sim", "lidar_height", s.lidar_height);
  v("sim", "camera_height", s.camera_height);
  v("sim", "wall_height", s.wall_height);
  v("sim", "event_threshold", s.event_threshold);
  v("sim", "event_noise_rate", s.event_noise_rate);
  v("sim", "lidar_noise_sigma", s.lidar_noise_sigma);
  v("sim", "speed", s.speed);
  v("sim", "wheelbase", s.wheelbase);
  v("sim", "lookahead", s.lookahead);
  v("sim", "steering_limit_deg", s.steering_limit_deg);
  v("sim", "start_offset_max", s.start_offset_max);
  v("sim", "extrinsic_error_deg", s.extrinsic_error_deg);
  v("sim", "extrinsic_error_m", s.extrinsic_error_m);
  v("sim", "start_time_ns", s.start_time_ns);
  v("sim", "intensity_bright", s.intensity_bright);
  v("sim", "intensity_dark", s.intensity_dark);
  v("sim", "intensity_background", s.intensity_background);

  auto& t = s.track;
  v("sim.track", "control_points", t.control_points);
  v("sim.track", "control_jitter", t.control_jitter);
  v("sim.track", "box_x", t.box_x);
  v("sim.track", "box_y", t.box_y);
  v("sim.track", "half_width", t.half_width);
  v("sim.track", "vehicle_width", t.vehicle_width);
  v("sim.track", "min_radius", t.min_radius);
  v("sim.track", "stripe_period", t.stripe_period);
  v("sim.track", "waypoint_spacing", t.waypoint_spacing);
  v("sim.track", "max_attempts", t.max_attempts);

  v("model", "widths", c.model.encoder.widths);
  v("model", "variant", c.model.fusion.variant);
  v("model", "latent", c.model.fusion.latent);
  v("model", "decoder_hidden", c.model.decoder_hidden);
  v("model", "output_scale", c.model.output_scale);

  v("loss", "lambda", c.loss.lambda);
  v("loss", "kl_epsilon", c.loss.kl_epsilon);

  auto& o = c.optim;
  v("optim", "lr", o.lr);
  v("optim", "weight_decay", o.weight_decay);
  v("optim", "beta1", o.beta1);
  v("optim", "beta2", o.beta2);
  v("optim", "adam_epsilon", o.adam_epsilon);
  v("optim", "restart_epochs", o.restart_epochs);
  v("optim", "epochs", o.epochs);
  v("optim", "batch_size", o.batch_size);
  v("optim", "flip_probability", o.flip_probability);
  v("optim", "clip_norm", o.clip_norm);

  v("bench", "seeds", c.bench.seeds);
  v("bench", "latent_values", c.bench.latent_values);
  v("bench", "perturbations", c.bench.perturbations);
}

std::string dotted(std::string_view section, std::string_view key) {
  return section.empty() ? std::string(key) : std::string(section) + "." + std::string(key);
}

// ---- JSON ------------------------------------------------------------------

json& json_section(json& root, std::string_view section) {
  json* node = &root;
  std::size_t start = 0;
  while (start < section.size()) {
    const auto dot = section.find('.', start);
    const auto part = std::string(section.substr(start, dot - start));
    node = &(*node)[part];
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return *node;
}

struct JsonWriter {
  json root = json::object();
  template <class T>
  void operator()(std::string_view section, std::string_view key, const T& value) {
    json& sec = json_section(root, section);
    if constexpr (std::is_same_v<T, FusionVariant>) {
      sec[std::string(key)] = std::string(to_string(value));
    } else {
      sec[std::string(key)] = value;
    }
  }
};

// ---- TOML parsing ----------------------------------------------------------

struct TomlReader {
  const toml::table& root;
  const std::string& source;
  std::set<std::string> known;

  [[noreturn]] void fail(const std::string& path, const std::string& what) const {
    throw ConfigError(source + ": " + path + ": " + what);
  }

  const toml::node* lookup(std::string_view section, std::string_view key) const {
    const toml::table* tbl = &root;
    std::size_t start = 0;
    while (start < section.size()) {
      const auto dot = section.find('.', start);
      const auto part = section.substr(start, dot - start);
      const toml::node* n = tbl->get(part);
      if (!n) return nullptr;
      tbl = n->as_table();
      if (!tbl) fail(std::string(section), "expected a table");
      if (dot == std::string_view::npos) break;
      start = dot + 1;
    }
    return tbl->get(key);
  }

  std::int64_t integer(const toml::node& n, const std::string& path) const {
    if (auto v = n.value_exact<std::int64_t>()) return *v;
    fail(path, "expected an integer");
  }

  double number(const toml::node& n, const std::string& path) const {
    if (auto v = n.value_exact<double>()) return *v;
    if (auto v = n.value_exact<std::int64_t>()) return static_cast<double>(*v);
    fail(path, "expected a number");
  }

  const toml::array& array(const toml::node& n, const std::string& path) const {
    const toml::array* a = n.as_array();
    if (!a) fail(path, "expected an array");
    return *a;
  }

  template <class T>
  void operator()(std::string_view section, std::string_view key, T& field) {
    const std::string path = dotted(section, key);
    known.insert(path);
    const toml::node* n = lookup(section, key);
    if (!n) return;
    if constexpr (std::is_same_v<T, int>) {
      const auto v = integer(*n, path);
      if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) fail(path, "out of range");
      field = static_cast<int>(v);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      const auto v = integer(*n, path);
      if (v < 0) fail(path, "must be non-negative");
      field = static_cast<std::uint64_t>(v);
    } else if constexpr (std::is_same_v<T, double>) {
      field = number(*n, path);
    } else if constexpr (std::is_same_v<T, FusionVariant>) {
      const auto s = n->value_exact<std::string>();
      if (!s) fail(path, "expected a string");
      try {
        field = parse_variant(*s);
      } catch (const std::invalid_argument& e) {
        fail(path, e.what());
      }
    } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<std::uint64_t>>) {
      T out;
      for (const auto& e : array(*n, path)) {
        const auto v = integer(e, path);
        if (std::is_same_v<T, std::vector<std::uint64_t>> && v < 0) fail(path, "entries must be non-negative");
        out.push_back(static_cast<typename T::value_type>(v));
      }
      field = std::move(out);
    } else if constexpr (std::is_same_v<T, std::vector<std::pair<double, double>>>) {
      T out;
      for (const auto& e : array(*n, path)) {
        const auto& pair = array(e, path);
        if (pair.size() != 2) fail(path, "entries must be [degrees, meters] pairs");
        out.emplace_back(number(*pair.get(0), path), number(*pair.get(1), path));
      }
      field = std::move(out);
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  void reject_unknown(const toml::table& tbl, const std::string& prefix) const {
    for (const auto& [k, node] : tbl) {
      const std::string path = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
      if (known.contains(path)) continue;
      if (const toml::table* sub = node.as_table()) {
        bool is_section = false;
        for (const auto& kn : known) is_section |= kn.starts_with(path + ".");
        if (is_section) {
          reject_unknown(*sub, path);
          continue;
        }
      }
      fail(path, "unknown key");
    }
  }
};

struct TomlWriter {
  toml::table root;

  toml::table& section_table(std::string_view section) {
    toml::table* tbl = &root;
    std::size_t start = 0;
    while (start < section.size()) {
      const auto dot = section.find('.', start);
      const std::string part(section.substr(start, dot - start));
      if (!tbl->contains(part)) tbl->insert(part, toml::table{});
      tbl = (*tbl)[part].as_table();
      if (dot == std::string_view::npos) break;
      start = dot + 1;
    }
    return *tbl;
  }

  template <class T>
  void operator()(std::string_view section, std::string_view key, const T& value) {
    toml::table& tbl = section_table(section);
    const std::string k(key);
    if constexpr (std::is_same_v<T, int>) {
      tbl.insert_or_assign(k, static_cast<std::int64_t>(value));
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      tbl.insert_or_assign(k, static_cast<std::int64_t>(value));
    } else if constexpr (std::is_same_v<T, double>) {
      tbl.insert_or_assign(k, value);
    } else if constexpr (std::is_same_v<T, FusionVariant>) {
      tbl.insert_or_assign(k, std::string(to_string(value)));
    } else if constexpr (std::is_same_v<T, std::vector<std::pair<double, double>>>) {
      toml::array arr;
      for (const auto& [a, b] : value) arr.push_back(toml::array{a, b});
      tbl.insert_or_assign(k, std::move(arr));
    } else {
      toml::array arr;
      for (auto x : value) arr.push_back(static_cast<std::int64_t>(x));
      tbl.insert_or_assign(k, std::move(arr));
    }
  }
};

void finalize(RunConfig& c, const std::string& source) {
  c.model.input_height = c.sim.height;
  c.model.input_width = c.sim.width;
  c.model.init_seed = c.seed;
  c.optim.seed = c.seed;
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(source + ": " + what);
  };
  try {
    validate(c.model);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": model: " + e.what());
  }
  require(c.data.train_bags >= 1 && c.data.test_bags >= 1, "data: need at least one train and one test bag");
  require(c.sim.duration_s > 0 && c.sim.lidar_hz > 0, "sim: duration_s and lidar_hz must be positive");
  require(c.sim.beam_count >= 1 && c.sim.width >= 1 && c.sim.height >= 1, "sim: sensor sizes must be positive");
  require(c.sim.event_threshold > 0, "sim: event_threshold must be positive");
  require(c.loss.lambda >= 0 && c.loss.kl_epsilon > 0, "loss: lambda >= 0 and kl_epsilon > 0 required");
  require(c.optim.lr > 0, "optim: lr must be positive");
  require(c.optim.restart_epochs >= 1, "optim: restart_epochs must be at least 1");
  require(c.optim.epochs >= 1 && c.optim.batch_size >= 1, "optim: epochs and batch_size must be positive");
  require(!c.bench.seeds.empty(), "bench: seeds must not be empty");
  require(!c.bench.latent_values.empty(), "bench: latent_values must not be empty");
  require(!c.bench.perturbations.empty(), "bench: perturbations must not be empty");
}

}  // namespace

RunConfig parse_config(const std::string& toml_text, const std::string& source) {
  toml::table root;
  try {
    root = toml::parse(toml_text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(msg.str());
  }
  RunConfig cfg;
  TomlReader reader{root, source, {}};
  visit_fields(cfg, reader);
  reader.reject_unknown(root, "");
  finalize(cfg, source);
  return cfg;
}

void finalize_config(RunConfig& cfg, const std::string& source) { finalize(cfg, source); }

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

json to_json(const RunConfig& cfg) {
  JsonWriter w;
  visit_fields(cfg, w);
  return w.root;
}

json to_json(const sim::SimConfig& cfg) {
  RunConfig rc;
  rc.sim = cfg;
  json j = to_json(rc).at("sim");
  j["seed"] = cfg.seed;
  return j;
}

std::string to_toml(const RunConfig& cfg) {
  TomlWriter w;
  visit_fields(cfg, w);
  std::ostringstream out;
  out << w.root << '\n';
  return out.str();
}

std::string hash_json(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return out;
}

json dataset_json(const RunConfig& cfg) {
  const json all = to_json(cfg);
  return {{"schema_version", kSchemaVersion}, {"seed", cfg.seed}, {"data", all.at("data")}, {"sim", all.at("sim")}};
}

std::string dataset_hash(const RunConfig& cfg) { return hash_json(dataset_json(cfg)); }

sim::SimConfig bag_config(const RunConfig& cfg, bool train, int index) {
  sim::SimConfig s = cfg.sim;
  s.seed = cfg.seed * 1000 + (train ? 0 : 500) + static_cast<std::uint64_t>(index);
  return s;
}

}  // namespace evfuse

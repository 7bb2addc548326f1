#include "evfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace evfuse {

namespace fs = std::filesystem;
using nlohmann::json;

json to_json(const ModelConfig& cfg) {
  return {
      {"encoder", {{"widths", cfg.encoder.widths}, {"in_channels", cfg.encoder.in_channels}}},
      {"fusion", {{"variant", std::string(to_string(cfg.fusion.variant))}, {"latent", cfg.fusion.latent}}},
      {"decoder_hidden", cfg.decoder_hidden},
      {"input_height", cfg.input_height},
      {"input_width", cfg.input_width},
      {"output_scale", cfg.output_scale},
      {"init_seed", cfg.init_seed},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.encoder.widths = j.at("encoder").at("widths").get<std::vector<int>>();
  cfg.encoder.in_channels = j.at("encoder").at("in_channels").get<int>();
  cfg.fusion.variant = parse_variant(j.at("fusion").at("variant").get<std::string>());
  cfg.fusion.latent = j.at("fusion").at("latent").get<int>();
  cfg.decoder_hidden = j.at("decoder_hidden").get<int>();
  cfg.input_height = j.at("input_height").get<int>();
  cfg.input_width = j.at("input_width").get<int>();
  cfg.output_scale = j.at("output_scale").get<double>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

void round_parameters_to_f32(const SteeringModel& model) {
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    auto v = t.mutable_values();
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(static_cast<float>(v[i]));
  }
}

void save_checkpoint(const fs::path& dir, const SteeringModel& model, const json& extra,
                     const std::string& config_hash) {
  fs::create_directories(dir);
  json table = json::array();
  std::string blob;
  for (const auto& p : model.parameters()) {
    table.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"dtype", "f32"}, {"offset", blob.size()}});
    for (double x : p.tensor.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  const json manifest = {
      {"schema_version", kCheckpointSchemaVersion},
      {"config_hash", config_hash},
      {"config", to_json(model.config())},
      {"extra", extra},
      {"parameters", table},
      {"total_bytes", blob.size()},
  };
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw CheckpointError("cannot write " + (dir / "params.bin").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw CheckpointError("missing " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw CheckpointError("manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("schema_version", -1) != kCheckpointSchemaVersion) {
    throw CheckpointError("unsupported checkpoint schema_version in " + dir.string());
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw CheckpointError("missing " + (dir / "params.bin").string());
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Checkpoint ck{SteeringModel(model_config_from_json(manifest.at("config"))), manifest.value("extra", json::object()),
                manifest.value("config_hash", std::string{})};
  const auto& table = manifest.at("parameters");
  if (table.size() != ck.model.parameters().size()) {
    throw CheckpointError("checkpoint has " + std::to_string(table.size()) + " parameters, model expects " +
                          std::to_string(ck.model.parameters().size()));
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& entry = table[i];
    const Parameter& p = ck.model.parameters()[i];
    if (entry.at("name").get<std::string>() != p.name || entry.at("shape").get<Shape>() != p.tensor.shape()) {
      throw CheckpointError("parameter " + std::to_string(i) + " mismatch: manifest has " +
                            entry.at("name").get<std::string>() + ", model expects " + p.name);
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    Tensor t = p.tensor;
    auto v = t.mutable_values();
    if (offset + 4 * static_cast<std::size_t>(v.size()) > blob.size()) {
      throw CheckpointError("params.bin is truncated at parameter " + p.name);
    }
    for (Index k = 0; k < v.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + 4 * k + b])) << (8 * b);
      }
      v[k] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return ck;
}

}  // namespace evfuse

#pragma once

#include "evfuse/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace evfuse {

enum class FusionVariant { low_rank_gated, concat_conv, output_mean, lidar_only, event_only };

std::string_view to_string(FusionVariant v);
/// Throws std::invalid_argument for unknown names.
FusionVariant parse_variant(std::string_view name);

struct EncoderConfig {
  std::vector<int> widths{8, 16, 32, 64};  // one 3x3 stride-2 conv + GeLU per stage
  int in_channels = 2;
};

struct FusionConfig {
  FusionVariant variant = FusionVariant::low_rank_gated;
  int latent = 16;  // r
};

struct ModelConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  int decoder_hidden = 32;
  int input_height = 65;
  int input_width = 86;
  /// The head regresses angle / output_scale; predictions come back in degrees.
  double output_scale = 10.0;
  std::uint64_t init_seed = 1;
};

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const ModelConfig& cfg);

struct Parameter {
  std::string name;
  Tensor tensor;
};

enum class Branch { lidar, event };

struct FusionOutput {
  Tensor f_S;
  Tensor attn;
  Tensor r_D, r_E;              // low-rank projections
  Tensor r_D_gated, r_E_gated;  // after the shared gate
};

struct Prediction {
  Tensor angle;  // [N], degrees
  // Populated by the fused variants only.
  Tensor f_S, f_D, f_E;
  bool fused() const { return f_S.defined(); }
};

/// Dual-branch steering regressor: encoders, optional fusion block, decoder.
///
/// Parameters are leaves shared with the layers, so writing through
/// parameters() changes what predict() computes.
class SteeringModel {
 public:
  explicit SteeringModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  FusionVariant variant() const { return cfg_.fusion.variant; }
  bool uses_lidar() const;
  bool uses_events() const;
  bool is_fused() const;
  /// Channel width at the encoder output.
  int feature_channels() const { return cfg_.encoder.widths.back(); }

  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter& parameter(std::string_view name) const;

  Tensor encode(const Tensor& input, Branch branch) const;
  FusionOutput fuse(const Tensor& f_D, const Tensor& f_E) const;
  /// Either input may be an undefined Tensor when the variant ignores it.
  Prediction predict(const Tensor& depth, const Tensor& events) const;

  void zero_grad();

 private:
  struct Conv {
    Tensor weight, bias;
    int stride = 1, padding = 0;
  };
  struct Dense {
    Tensor weight, bias;
  };
  struct Decoder {
    Dense hidden, out;
  };

  Conv make_conv(const std::string& name, int cin, int cout, int k, int stride, int padding);
  Dense make_dense(const std::string& name, int fin, int fout);
  Decoder make_decoder(const std::string& prefix);
  Tensor decode(const Decoder& d, const Tensor& features) const;
  static Tensor apply(const Conv& c, const Tensor& x);

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::uint64_t rng_state_ = 0;
  std::vector<Conv> enc_d_, enc_e_;
  // Low-rank gated block.
  Conv proj_d_, proj_e_, gate_, merge_;
  // Concat baseline.
  Conv concat_;
  Decoder dec_, dec_d_, dec_e_;
};

/// Low-rank gated block on explicit weights, used by SteeringModel::fuse.
FusionOutput fuse_low_rank_gated(const Tensor& f_D, const Tensor& f_E, const Tensor& w_proj_d,
                                 const Tensor& b_proj_d, const Tensor& w_proj_e, const Tensor& b_proj_e,
                                 const Tensor& w_gate, const Tensor& b_gate, const Tensor& w_merge,
                                 const Tensor& b_merge);

struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;  // per single-sample forward pass
  std::int64_t fusion_params = 0;
};

/// Parameters are enumerated from the model; FLOPs count 2 per multiply-accumulate,
/// 1 per bias add, and 1 per element of each pointwise op.
CostReport count_params_flops(const SteeringModel& model);

std::int64_t low_rank_fusion_params(std::int64_t C, std::int64_t r);
std::int64_t concat_fusion_params(std::int64_t C);

/// Encoder output spatial size for the configured input.
std::pair<int, int> encoder_output_size(const ModelConfig& cfg);

}  // namespace evfuse

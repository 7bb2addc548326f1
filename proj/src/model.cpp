#include "evfuse/model.hpp"

#include <cmath>
#include <stdexcept>

namespace evfuse {

namespace {

constexpr std::pair<FusionVariant, std::string_view> kVariantNames[] = {
    {FusionVariant::low_rank_gated, "low_rank_gated"}, {FusionVariant::concat_conv, "concat_conv"},
    {FusionVariant::output_mean, "output_mean"},       {FusionVariant::lidar_only, "lidar_only"},
    {FusionVariant::event_only, "event_only"},
};

// splitmix64: portable, so initial weights do not depend on the standard library.
std::uint64_t next_u64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double uniform(std::uint64_t& state, double lo, double hi) {
  const double u = static_cast<double>(next_u64(state) >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

int conv_out(int n, int k, int stride, int padding) { return (n + 2 * padding - k) / stride + 1; }

}  // namespace

std::string_view to_string(FusionVariant v) {
  for (const auto& [variant, name] : kVariantNames) {
    if (variant == v) return name;
  }
  return "unknown";
}

FusionVariant parse_variant(std::string_view name) {
  for (const auto& [variant, n] : kVariantNames) {
    if (n == name) return variant;
  }
  throw std::invalid_argument("unknown fusion variant '" + std::string(name) +
                              "' (expected low_rank_gated, concat_conv, output_mean, lidar_only or event_only)");
}

void validate(const ModelConfig& cfg) {
  if (cfg.encoder.widths.empty()) throw std::invalid_argument("encoder needs at least one stage");
  for (int w : cfg.encoder.widths) {
    if (w < 1) throw std::invalid_argument("encoder widths must be positive");
  }
  if (cfg.encoder.in_channels < 1) throw std::invalid_argument("encoder in_channels must be positive");
  if (cfg.decoder_hidden < 1) throw std::invalid_argument("decoder_hidden must be positive");
  if (cfg.input_height < 1 || cfg.input_width < 1) throw std::invalid_argument("input size must be positive");
  if (!(cfg.output_scale > 0)) throw std::invalid_argument("output_scale must be positive");
  const int C = cfg.encoder.widths.back();
  if (cfg.fusion.variant == FusionVariant::low_rank_gated && (cfg.fusion.latent < 1 || cfg.fusion.latent > C)) {
    throw std::invalid_argument("latent r = " + std::to_string(cfg.fusion.latent) + " must lie in [1, C = " +
                                std::to_string(C) + "]");
  }
}

std::pair<int, int> encoder_output_size(const ModelConfig& cfg) {
  int h = cfg.input_height, w = cfg.input_width;
  for (std::size_t i = 0; i < cfg.encoder.widths.size(); ++i) {
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  }
  return {h, w};
}

SteeringModel::SteeringModel(ModelConfig cfg) : cfg_(std::move(cfg)), rng_state_(cfg_.init_seed) {
  validate(cfg_);
  const auto& widths = cfg_.encoder.widths;
  auto build_encoder = [&](const std::string& prefix, std::vector<Conv>& stages) {
    int cin = cfg_.encoder.in_channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      stages.push_back(make_conv(prefix + ".stage" + std::to_string(i), cin, widths[i], 3, 2, 1));
      cin = widths[i];
    }
  };
  const int C = widths.back();
  const int r = cfg_.fusion.latent;
  if (uses_lidar()) build_encoder("encoder_d", enc_d_);
  if (uses_events()) build_encoder("encoder_e", enc_e_);
  switch (cfg_.fusion.variant) {
    case FusionVariant::low_rank_gated:
      proj_d_ = make_conv("fusion.proj_d", C, r, 1, 1, 0);
      proj_e_ = make_conv("fusion.proj_e", C, r, 1, 1, 0);
      gate_ = make_conv("fusion.gate", 2 * r, r, 1, 1, 0);
      merge_ = make_conv("fusion.merge", 2 * r, C, 1, 1, 0);
      dec_ = make_decoder("decoder");
      break;
    case FusionVariant::concat_conv:
      concat_ = make_conv("fusion.concat", 2 * C, C, 1, 1, 0);
      dec_ = make_decoder("decoder");
      break;
    case FusionVariant::output_mean:
      dec_d_ = make_decoder("decoder_d");
      dec_e_ = make_decoder("decoder_e");
      break;
    case FusionVariant::lidar_only:
    case FusionVariant::event_only:
      dec_ = make_decoder("decoder");
      break;
  }
}

bool SteeringModel::uses_lidar() const { return cfg_.fusion.variant != FusionVariant::event_only; }
bool SteeringModel::uses_events() const { return cfg_.fusion.variant != FusionVariant::lidar_only; }
bool SteeringModel::is_fused() const {
  return cfg_.fusion.variant == FusionVariant::low_rank_gated || cfg_.fusion.variant == FusionVariant::concat_conv;
}

const Parameter& SteeringModel::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

void SteeringModel::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

SteeringModel::Conv SteeringModel::make_conv(const std::string& name, int cin, int cout, int k, int stride,
                                             int padding) {
  const int fan_in = cin * k * k;
  const double bound = std::sqrt(6.0 / fan_in);  // Kaiming-uniform, fan-in
  Eigen::VectorXd w(static_cast<Index>(cout) * fan_in);
  for (Index i = 0; i < w.size(); ++i) w[i] = uniform(rng_state_, -bound, bound);
  Conv c;
  c.weight = Tensor::from({cout, cin, k, k}, std::move(w), true);
  c.bias = Tensor::zeros({cout}, true);
  c.stride = stride;
  c.padding = padding;
  params_.push_back({name + ".weight", c.weight});
  params_.push_back({name + ".bias", c.bias});
  return c;
}

SteeringModel::Dense SteeringModel::make_dense(const std::string& name, int fin, int fout) {
  const double bound = std::sqrt(6.0 / fin);
  Eigen::VectorXd w(static_cast<Index>(fout) * fin);
  for (Index i = 0; i < w.size(); ++i) w[i] = uniform(rng_state_, -bound, bound);
  Dense d;
  d.weight = Tensor::from({fout, fin}, std::move(w), true);
  d.bias = Tensor::zeros({fout}, true);
  params_.push_back({name + ".weight", d.weight});
  params_.push_back({name + ".bias", d.bias});
  return d;
}

SteeringModel::Decoder SteeringModel::make_decoder(const std::string& prefix) {
  Decoder d;
  d.hidden = make_dense(prefix + ".hidden", feature_channels(), cfg_.decoder_hidden);
  d.out = make_dense(prefix + ".out", cfg_.decoder_hidden, 1);
  return d;
}

Tensor SteeringModel::apply(const Conv& c, const Tensor& x) { return conv2d(x, c.weight, c.bias, c.stride, c.padding); }

Tensor SteeringModel::encode(const Tensor& input, Branch branch) const {
  const auto& stages = branch == Branch::lidar ? enc_d_ : enc_e_;
  if (stages.empty()) {
    throw std::logic_error(std::string("variant ") + std::string(to_string(variant())) + " has no " +
                           (branch == Branch::lidar ? "LiDAR" : "event") + " encoder");
  }
  if (input.rank() != 4 || input.dim(1) != cfg_.encoder.in_channels) {
    throw DimensionError("encoder input must be [N, " + std::to_string(cfg_.encoder.in_channels) +
                         ", H, W]; got " + shape_string(input.shape()));
  }
  Tensor x = input;
  for (const Conv& c : stages) x = gelu(apply(c, x));
  return x;
}

FusionOutput fuse_low_rank_gated(const Tensor& f_D, const Tensor& f_E, const Tensor& w_proj_d,
                                 const Tensor& b_proj_d, const Tensor& w_proj_e, const Tensor& b_proj_e,
                                 const Tensor& w_gate, const Tensor& b_gate, const Tensor& w_merge,
                                 const Tensor& b_merge) {
  if (f_D.shape() != f_E.shape()) {
    throw DimensionError("fusion inputs differ: f_D " + shape_string(f_D.shape()) + " vs f_E " +
                         shape_string(f_E.shape()));
  }
  FusionOutput out;
  out.r_D = conv2d(f_D, w_proj_d, b_proj_d, 1, 0);
  out.r_E = conv2d(f_E, w_proj_e, b_proj_e, 1, 0);
  out.attn = gelu(conv2d(channel_concat(out.r_D, out.r_E), w_gate, b_gate, 1, 0));
  out.r_D_gated = mul(out.attn, out.r_D);
  out.r_E_gated = mul(out.attn, out.r_E);
  out.f_S = conv2d(channel_concat(out.r_D_gated, out.r_E_gated), w_merge, b_merge, 1, 0);
  return out;
}

FusionOutput SteeringModel::fuse(const Tensor& f_D, const Tensor& f_E) const {
  switch (cfg_.fusion.variant) {
    case FusionVariant::low_rank_gated:
      return fuse_low_rank_gated(f_D, f_E, proj_d_.weight, proj_d_.bias, proj_e_.weight, proj_e_.bias,
                                 gate_.weight, gate_.bias, merge_.weight, merge_.bias);
    case FusionVariant::concat_conv: {
      if (f_D.shape() != f_E.shape()) {
        throw DimensionError("fusion inputs differ: f_D " + shape_string(f_D.shape()) + " vs f_E " +
                             shape_string(f_E.shape()));
      }
      FusionOutput out;
      out.f_S = apply(concat_, channel_concat(f_D, f_E));
      return out;
    }
    default:
      throw std::logic_error("variant " + std::string(to_string(variant())) + " has no feature fusion block");
  }
}

Tensor SteeringModel::decode(const Decoder& d, const Tensor& features) const {
  Tensor h = gelu(linear(global_avg_pool(features), d.hidden.weight, d.hidden.bias));
  Tensor y = linear(h, d.out.weight, d.out.bias);
  return scale(reshape(y, {y.dim(0)}), cfg_.output_scale);
}

Prediction SteeringModel::predict(const Tensor& depth, const Tensor& events) const {
  if (uses_lidar() && !depth.defined()) {
    throw std::invalid_argument("variant " + std::string(to_string(variant())) + " needs the depth input");
  }
  if (uses_events() && !events.defined()) {
    throw std::invalid_argument("variant " + std::string(to_string(variant())) + " needs the event input");
  }
  if (uses_lidar() && uses_events() && depth.dim(0) != events.dim(0)) {
    throw DimensionError("batch sizes differ: depth " + std::to_string(depth.dim(0)) + " vs events " +
                         std::to_string(events.dim(0)));
  }
  Prediction p;
  switch (cfg_.fusion.variant) {
    case FusionVariant::lidar_only:
      p.angle = decode(dec_, encode(depth, Branch::lidar));
      break;
    case FusionVariant::event_only:
      p.angle = decode(dec_, encode(events, Branch::event));
      break;
    case FusionVariant::output_mean:
      p.angle = scale(add(decode(dec_d_, encode(depth, Branch::lidar)), decode(dec_e_, encode(events, Branch::event))),
                      0.5);
      break;
    case FusionVariant::low_rank_gated:
    case FusionVariant::concat_conv:
      p.f_D = encode(depth, Branch::lidar);
      p.f_E = encode(events, Branch::event);
      p.f_S = fuse(p.f_D, p.f_E).f_S;
      p.angle = decode(dec_, p.f_S);
      break;
  }
  return p;
}

std::int64_t low_rank_fusion_params(std::int64_t C, std::int64_t r) { return 4 * C * r + 2 * r * r + C + 3 * r; }
std::int64_t concat_fusion_params(std::int64_t C) { return 2 * C * C + C; }

CostReport count_params_flops(const SteeringModel& model) {
  CostReport cost;
  for (const auto& p : model.parameters()) {
    cost.params += p.tensor.numel();
    if (p.name.starts_with("fusion.")) cost.fusion_params += p.tensor.numel();
  }

  const ModelConfig& cfg = model.config();
  std::int64_t flops_encoder = 0;
  {
    std::int64_t h = cfg.input_height, w = cfg.input_width, cin = cfg.encoder.in_channels;
    for (int cout : cfg.encoder.widths) {
      h = conv_out(static_cast<int>(h), 3, 2, 1);
      w = conv_out(static_cast<int>(w), 3, 2, 1);
      const std::int64_t outputs = cout * h * w;
      flops_encoder += outputs * (2 * cin * 9 + 1) + outputs;  // conv + bias, then GeLU
      cin = cout;
    }
  }
  const auto [h, w] = encoder_output_size(cfg);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::int64_t C = model.feature_channels();
  const std::int64_t hidden = cfg.decoder_hidden;
  // GAP, hidden linear + GeLU, output linear, output scaling.
  const std::int64_t flops_decoder = C * hw + hidden * (2 * C + 1) + hidden + (2 * hidden + 1) + 1;

  switch (model.variant()) {
    case FusionVariant::lidar_only:
    case FusionVariant::event_only:
      cost.flops = flops_encoder + flops_decoder;
      break;
    case FusionVariant::output_mean:
      cost.flops = 2 * (flops_encoder + flops_decoder) + 2;
      break;
    case FusionVariant::concat_conv:
      cost.flops = 2 * flops_encoder + C * hw * (2 * 2 * C + 1) + flops_decoder;
      break;
    case FusionVariant::low_rank_gated: {
      const std::int64_t r = cfg.fusion.latent;
      const std::int64_t fusion = 2 * r * hw * (2 * C + 1)      // two projections
                                  + r * hw * (2 * 2 * r + 1)    // gate conv
                                  + r * hw                      // GeLU
                                  + 2 * r * hw                  // two gate products
                                  + C * hw * (2 * 2 * r + 1);   // merge
      cost.flops = 2 * flops_encoder + fusion + flops_decoder;
      break;
    }
  }
  return cost;
}

}  // namespace evfuse

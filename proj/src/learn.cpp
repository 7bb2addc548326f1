#include "evfuse/learn.hpp"

#include "evfuse/checkpoint.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace evfuse {

namespace {

std::string fmt(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

double parse_double(std::string_view s, const std::filesystem::path& path) {
  double x = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw std::runtime_error(path.string() + ": bad number '" + std::string(s) + "'");
  }
  return x;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

void check_lengths(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw std::invalid_argument("metric inputs differ in length: " + std::to_string(y.size()) + " vs " +
                                std::to_string(y_hat.size()));
  }
  if (y.empty()) throw std::invalid_argument("metric inputs are empty");
}

}  // namespace

TrainingDivergedError::TrainingDivergedError(int epoch_, int batch_, std::string op_, const std::string& detail)
    : NumericError("training diverged at epoch " + std::to_string(epoch_) + ", batch " + std::to_string(batch_) +
                   " (first non-finite value from " + op_ + "): " + detail),
      epoch(epoch_),
      batch(batch_),
      op(std::move(op_)) {}

// ---- losses ----------------------------------------------------------------

Tensor feature_distribution(const Tensor& x, double epsilon) {
  if (x.rank() != 4) throw DimensionError("feature_distribution expects [N, C, H, W]; got " + shape_string(x.shape()));
  const double positions = static_cast<double>(x.dim(2) * x.dim(3));
  return scale(add_scalar(spatial_softmax(x), epsilon), 1.0 / (1.0 + positions * epsilon));
}

Tensor symmetric_kl(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw DimensionError("symmetric_kl shape mismatch: " + shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  }
  // KL(P||Q) + KL(Q||P) = sum (P - Q)(log P - log Q)
  const Tensor terms = mul(sub(p, q), sub(log(p), log(q)));
  return scale(sum(terms), 1.0 / static_cast<double>(p.dim(0)));
}

Tensor kl_divergence_loss(const Tensor& f_S, const Tensor& f_D, const Tensor& f_E, double epsilon) {
  if (f_S.shape() != f_D.shape() || f_S.shape() != f_E.shape()) {
    throw DimensionError("kl_divergence_loss shape mismatch: f_S " + shape_string(f_S.shape()) + ", f_D " +
                         shape_string(f_D.shape()) + ", f_E " + shape_string(f_E.shape()));
  }
  const Tensor s = feature_distribution(f_S, epsilon);
  return add(symmetric_kl(s, feature_distribution(f_D, epsilon)), symmetric_kl(s, feature_distribution(f_E, epsilon)));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) { return mean(square(sub(pred, target))); }

Tensor total_loss(const Prediction& pred, const Tensor& target, const LossConfig& cfg) {
  Tensor loss = mse_loss(pred.angle, target);
  if (pred.fused() && cfg.lambda > 0) {
    loss = add(loss, scale(kl_divergence_loss(pred.f_S, pred.f_D, pred.f_E, cfg.kl_epsilon), cfg.lambda));
  }
  return loss;
}

// ---- metrics ---------------------------------------------------------------

double rmse(std::span<const double> y, std::span<const double> y_hat) {
  check_lengths(y, y_hat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return std::sqrt(s / static_cast<double>(y.size()));
}

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check_lengths(y, y_hat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double eva(std::span<const double> y, std::span<const double> y_hat) {
  check_lengths(y, y_hat);
  const double n = static_cast<double>(y.size());
  auto variance = [n](auto&& value, std::size_t count) {
    double m = 0.0;
    for (std::size_t i = 0; i < count; ++i) m += value(i);
    m /= n;
    double v = 0.0;
    for (std::size_t i = 0; i < count; ++i) v += (value(i) - m) * (value(i) - m);
    return v / n;
  };
  const double var_y = variance([&](std::size_t i) { return y[i]; }, y.size());
  if (!(var_y > 0)) throw std::domain_error("explained variance is undefined for a constant ground truth");
  const double var_r = variance([&](std::size_t i) { return y[i] - y_hat[i]; }, y.size());
  return 1.0 - var_r / var_y;
}

// ---- optimization ----------------------------------------------------------

void adamw_step(const std::vector<Parameter>& params, AdamState& state, const OptimConfig& cfg, double lr_t) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
      state.v.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("AdamW state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& node = *params[i].tensor.node();
    Eigen::VectorXd& theta = node.value;
    const Eigen::VectorXd& g = node.ensure_grad();
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    theta *= 1.0 - lr_t * cfg.weight_decay;
    theta.array() -= lr_t * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + cfg.adam_epsilon);
  }
}

double cosine_warm_restarts(double epoch, double base_lr, double restart_epochs) {
  if (!(restart_epochs >= 1.0)) throw std::invalid_argument("restart interval must be at least one epoch");
  const double phase = std::fmod(epoch, restart_epochs) / restart_epochs;
  return base_lr * (1.0 + std::cos(std::numbers::pi * phase)) / 2.0;
}

double gradient_norm(const std::vector<Parameter>& params) {
  double s = 0.0;
  for (const auto& p : params) s += p.tensor.node()->ensure_grad().squaredNorm();
  return std::sqrt(s);
}

// ---- data ------------------------------------------------------------------

nlohmann::json Normalizer::to_json() const { return {{"range_max", range_max}, {"event_log_max", event_log_max}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer n;
  n.range_max = j.at("range_max").get<double>();
  n.event_log_max = j.at("event_log_max").get<double>();
  return n;
}

Normalizer fit_normalizer(const std::vector<SampleTriplet>& train, double range_max) {
  Normalizer n;
  n.range_max = range_max;
  int max_count = 0;
  for (const auto& t : train) {
    if (!t.event_frame) continue;
    max_count = std::max({max_count, t.event_frame->on_counts.maxCoeff(), t.event_frame->off_counts.maxCoeff()});
  }
  n.event_log_max = std::log1p(static_cast<double>(std::max(max_count, 1)));
  return n;
}

std::vector<Sample> prepare_samples(const std::vector<SampleTriplet>& triplets, const Normalizer& norm,
                                    bool with_events) {
  std::vector<Sample> out;
  out.reserve(triplets.size());
  for (const auto& tr : triplets) {
    const auto& d1 = tr.depth_t1->pixels;
    const auto& d2 = tr.depth_t2->pixels;
    const Index plane = d1.size();
    Sample s;
    s.target = tr.target_deg;
    s.t = tr.t2;
    s.depth.resize(2 * plane);
    s.depth.head(plane) = (Eigen::Map<const Eigen::VectorXd>(d1.data(), plane) / norm.range_max).cast<float>();
    s.depth.tail(plane) = (Eigen::Map<const Eigen::VectorXd>(d2.data(), plane) / norm.range_max).cast<float>();
    if (with_events) {
      if (!tr.event_frame) throw std::invalid_argument("prepare_samples: triplet has no event frame");
      const auto& on = tr.event_frame->on_counts;
      const auto& off = tr.event_frame->off_counts;
      if (on.size() != plane) throw DimensionError("event frame size differs from the depth map size");
      s.events.resize(2 * plane);
      auto encode = [&](const auto& counts) {
        return (Eigen::Map<const Eigen::VectorXi>(counts.data(), plane).cast<double>().array().log1p() /
                norm.event_log_max)
            .matrix()
            .cast<float>();
      };
      s.events.head(plane) = encode(on);
      s.events.tail(plane) = encode(off);
    }
    out.push_back(std::move(s));
  }
  return out;
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 const std::vector<bool>& flip, int height, int width) {
  const Index n = static_cast<Index>(indices.size());
  const Index plane = static_cast<Index>(height) * width;
  const bool with_depth = samples[indices[0]].depth.size() > 0;
  const bool with_events = samples[indices[0]].events.size() > 0;
  Eigen::VectorXd depth(with_depth ? n * 2 * plane : 0), events(with_events ? n * 2 * plane : 0), target(n);

  auto copy = [&](const Eigen::VectorXf& src, Eigen::VectorXd& dst, Index row, bool mirror) {
    if (src.size() != 2 * plane) throw DimensionError("sample plane size does not match the model input size");
    auto out = dst.segment(row * 2 * plane, 2 * plane);
    if (!mirror) {
      out = src.cast<double>();
      return;
    }
    for (Index c = 0; c < 2 * height; ++c) {
      out.segment(c * width, width) = src.segment(c * width, width).reverse().cast<double>();
    }
  };
  for (Index i = 0; i < n; ++i) {
    const Sample& s = samples[indices[i]];
    const bool mirror = !flip.empty() && flip[i];
    if (with_depth) copy(s.depth, depth, i, mirror);
    if (with_events) copy(s.events, events, i, mirror);
    target[i] = mirror ? -s.target : s.target;
  }
  Batch b;
  if (with_depth) b.depth = Tensor::from({n, 2, height, width}, std::move(depth));
  if (with_events) b.events = Tensor::from({n, 2, height, width}, std::move(events));
  b.target = Tensor::from({n}, std::move(target));
  return b;
}

// ---- training --------------------------------------------------------------

std::vector<EpochRecord> fit(SteeringModel& model, const std::vector<Sample>& train, const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  const OptimConfig& oc = cfg.optim;
  if (!(oc.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (oc.batch_size < 1 || oc.epochs < 1) throw std::invalid_argument("batch_size and epochs must be positive");
  if (cfg.loss.lambda < 0 || !(cfg.loss.kl_epsilon > 0)) throw std::invalid_argument("invalid loss configuration");

  const int H = model.config().input_height, W = model.config().input_width;
  std::mt19937_64 rng(oc.seed);
  std::bernoulli_distribution coin(oc.flip_probability);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches = (train.size() + oc.batch_size - 1) / oc.batch_size;
  AdamState state;
  std::vector<EpochRecord> history;

  for (int epoch = 0; epoch < oc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    const double epoch_lr = cosine_warm_restarts(epoch, oc.lr, oc.restart_epochs);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * oc.batch_size;
      const std::size_t end = std::min(train.size(), begin + oc.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<bool> flip(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) flip[i] = oc.flip_probability > 0 && coin(rng);
      const Batch batch = make_batch(train, idx, flip, H, W);

      model.zero_grad();
      const Prediction pred = model.predict(batch.depth, batch.events);
      for (const Tensor* t : {&pred.f_D, &pred.f_E, &pred.f_S, &pred.angle}) {
        if (t->defined() && !t->values().allFinite()) {
          throw TrainingDivergedError(epoch, static_cast<int>(b), t->op_name(), "non-finite activations");
        }
      }
      Tensor loss;
      try {
        loss = total_loss(pred, batch.target, cfg.loss);
      } catch (const NumericError& e) {
        throw TrainingDivergedError(epoch, static_cast<int>(b), "loss", e.what());
      }
      if (!std::isfinite(loss.item())) {
        throw TrainingDivergedError(epoch, static_cast<int>(b), "loss", "loss = " + fmt(loss.item()));
      }
      backward(loss);

      if (oc.clip_norm > 0) {
        const double norm = gradient_norm(model.parameters());
        if (!std::isfinite(norm)) {
          throw TrainingDivergedError(epoch, static_cast<int>(b), "backward", "gradient norm is not finite");
        }
        if (norm > oc.clip_norm) {
          for (const auto& p : model.parameters()) p.tensor.node()->grad *= oc.clip_norm / norm;
        }
      }
      const double t = epoch + static_cast<double>(b) / static_cast<double>(batches);
      adamw_step(model.parameters(), state, oc, cosine_warm_restarts(t, oc.lr, oc.restart_epochs));
      loss_sum += loss.item();
    }
    history.push_back({epoch, loss_sum / static_cast<double>(batches), epoch_lr});
    if (cfg.on_epoch) cfg.on_epoch(history.back());
  }
  round_parameters_to_f32(model);
  return history;
}

nlohmann::json EvalReport::summary() const {
  nlohmann::json j = {{"rmse", rmse}, {"mae", mae}, {"frames", targets.size()}, {"seconds", seconds},
                      {"frames_per_second", frames_per_second}};
  j["eva"] = std::isfinite(eva) ? nlohmann::json(eva) : nlohmann::json(nullptr);
  return j;
}

namespace {

void fill_metrics(EvalReport& r) {
  r.rmse = rmse(r.targets, r.predictions);
  r.mae = mae(r.targets, r.predictions);
  try {
    r.eva = eva(r.targets, r.predictions);
  } catch (const std::domain_error&) {
    r.eva = std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

EvalReport evaluate(const SteeringModel& model, const std::vector<Sample>& samples, int batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty test set");
  const int H = model.config().input_height, W = model.config().input_width;
  EvalReport r;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(samples.size(), begin + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(samples, idx, {}, H, W);
    const Prediction pred = model.predict(batch.depth, batch.events);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      r.targets.push_back(batch.target.values()[static_cast<Index>(i)]);
      r.predictions.push_back(pred.angle.values()[static_cast<Index>(i)]);
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.frames_per_second = r.seconds > 0 ? static_cast<double>(samples.size()) / r.seconds : 0.0;
  fill_metrics(r);
  return r;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  out << "epoch,loss,lr\n";
  for (const auto& e : history) out << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.lr) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  out << "frame,target,prediction\n";
  for (std::size_t i = 0; i < report.targets.size(); ++i) {
    out << i << ',' << fmt(report.targets[i]) << ',' << fmt(report.predictions[i]) << '\n';
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    const auto f = split(line);
    if (f.size() != 3) throw std::runtime_error(path.string() + ": expected 3 columns");
    out.push_back({static_cast<int>(parse_double(f[0], path)), parse_double(f[1], path), parse_double(f[2], path)});
  }
  return out;
}

EvalReport read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  EvalReport r;
  while (std::getline(in, line)) {
    const auto f = split(line);
    if (f.size() != 3) throw std::runtime_error(path.string() + ": expected 3 columns");
    r.targets.push_back(parse_double(f[1], path));
    r.predictions.push_back(parse_double(f[2], path));
  }
  if (r.targets.empty()) throw std::runtime_error(path.string() + ": no rows");
  fill_metrics(r);
  return r;
}

}  // namespace evfuse

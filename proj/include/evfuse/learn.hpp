#pragma once

#include "evfuse/model.hpp"
#include "evfuse/sensors.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evfuse {

struct LossConfig {
  double lambda = 0.25;  // weight of the divergence term
  double kl_epsilon = 1e-8;
};

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double restart_epochs = 30.0;
  int epochs = 30;
  int batch_size = 32;
  std::uint64_t seed = 1;
  double flip_probability = 0.5;
  double clip_norm = 10.0;  // <= 0 disables clipping
};

/// Thrown when the loss stops being finite; says where it happened.
class TrainingDivergedError : public NumericError {
 public:
  TrainingDivergedError(int epoch, int batch, std::string op, const std::string& detail);
  int epoch;
  int batch;
  std::string op;
};

// ---- losses ----------------------------------------------------------------

/// Per-(n, c) spatial distribution with an epsilon floor, renormalized.
Tensor feature_distribution(const Tensor& x, double epsilon);
/// KL(P||Q) + KL(Q||P) summed over channels and positions, averaged over the batch.
Tensor symmetric_kl(const Tensor& p, const Tensor& q);
/// L_KL(f_S, f_D) + L_KL(f_S, f_E) on spatial-softmax distributions.
Tensor kl_divergence_loss(const Tensor& f_S, const Tensor& f_D, const Tensor& f_E, double epsilon = 1e-8);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// lambda * L_div + MSE; the divergence term is dropped when the prediction
/// carries no fused features or lambda is zero.
Tensor total_loss(const Prediction& pred, const Tensor& target, const LossConfig& cfg);

// ---- metrics ---------------------------------------------------------------

double rmse(std::span<const double> y, std::span<const double> y_hat);
double mae(std::span<const double> y, std::span<const double> y_hat);
/// 1 - Var(y - y_hat) / Var(y), population variances. Throws std::domain_error for constant y.
double eva(std::span<const double> y, std::span<const double> y_hat);

// ---- optimization ----------------------------------------------------------

struct AdamState {
  std::vector<Eigen::VectorXd> m, v;
  std::int64_t step = 0;
};

/// One AdamW update using the gradients stored on the parameters.
void adamw_step(const std::vector<Parameter>& params, AdamState& state, const OptimConfig& cfg, double lr_t);
double cosine_warm_restarts(double epoch, double base_lr, double restart_epochs = 30.0);
/// Global L2 norm of all parameter gradients.
double gradient_norm(const std::vector<Parameter>& params);

// ---- data ------------------------------------------------------------------

/// Scales raw sensor frames into bounded network inputs.
struct Normalizer {
  double range_max = 10.0;
  double event_log_max = 1.0;  // log(1 + largest per-pixel count seen in training)

  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

Normalizer fit_normalizer(const std::vector<SampleTriplet>& train, double range_max);

/// Network-ready sample: two [2, H, W] planes stored as f32, row-major.
struct Sample {
  Eigen::VectorXf depth;
  Eigen::VectorXf events;  // empty when events were not loaded
  double target = 0.0;     // degrees
  Nanoseconds t = 0;
};

std::vector<Sample> prepare_samples(const std::vector<SampleTriplet>& triplets, const Normalizer& norm,
                                    bool with_events);

struct Batch {
  Tensor depth, events, target;
};

/// Stacks samples into [N, 2, H, W] tensors; flip[i] mirrors sample i
/// horizontally and negates its target.
Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 const std::vector<bool>& flip, int height, int width);

// ---- training --------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;  // mean training loss over the epoch's batches
  double lr = 0.0;    // learning rate at the start of the epoch
};

struct TrainConfig {
  LossConfig loss;
  OptimConfig optim;
  /// Called after every epoch; used for progress output.
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Mini-batch AdamW training; ends by rounding parameters to f32 so the
/// trained model and its checkpoint evaluate identically.
std::vector<EpochRecord> fit(SteeringModel& model, const std::vector<Sample>& train, const TrainConfig& cfg);

struct EvalReport {
  double rmse = 0.0, mae = 0.0, eva = 0.0;
  std::vector<double> targets, predictions;
  double seconds = 0.0;
  double frames_per_second = 0.0;

  nlohmann::json summary() const;
};

EvalReport evaluate(const SteeringModel& model, const std::vector<Sample>& samples, int batch_size = 64);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);
/// Reads a predictions CSV back; metrics are recomputed from the rows.
EvalReport read_predictions_csv(const std::filesystem::path& path);

}  // namespace evfuse

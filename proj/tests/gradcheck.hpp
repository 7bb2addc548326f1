#pragma once

// Central finite-difference oracle for the autodiff engine. Lives in test
// code only; it calls nothing but forward passes.

#include "evfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace evfuse::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checked = 0;
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kRelTol = 1e-4;
inline constexpr double kAbsFloor = 1e-8;

inline Eigen::VectorXd random_vector(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
  const Index n = shape_numel(shape);
  return Tensor::from(std::move(shape), random_vector(n, rng, lo, hi), requires_grad);
}

/// Relative error with the denominator floored, so near-zero gradients are
/// judged on their absolute gap scaled by the floor.
inline double elementwise_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kAbsFloor});
}

/// `fn` must build a fresh graph from the given leaves and return a scalar.
/// Every input is perturbed element by element; `max_elements` caps the
/// number of probed entries per input (evenly strided) for large tensors.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                 const std::vector<Tensor>& inputs, Index max_elements = 1 << 30) {
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(Tensor::from(t.shape(), t.values(), true));
  Tensor loss = fn(leaves);
  backward(loss);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Eigen::VectorXd analytic = leaves[k].grad();
    const Eigen::VectorXd base = inputs[k].values();
    const Index n = base.size();
    const Index stride = std::max<Index>(1, n / std::max<Index>(1, max_elements));
    for (Index i = 0; i < n; i += stride) {
      auto eval = [&](double delta) {
        std::vector<Tensor> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Eigen::VectorXd v = inputs[j].values();
          if (j == k) v[i] += delta;
          probe.push_back(Tensor::from(inputs[j].shape(), std::move(v), false));
        }
        return fn(probe).item();
      };
      const double numeric = (eval(kFdStep) - eval(-kFdStep)) / (2.0 * kFdStep);
      result.max_rel_error = std::max(result.max_rel_error, elementwise_error(analytic[i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

/// Same oracle for tensors owned by a model: `loss_fn` rebuilds the forward
/// pass from the current parameter values, which are nudged in place.
inline GradCheckResult parameter_gradcheck(const std::vector<Tensor>& params, const std::function<Tensor()>& loss_fn,
                                           Index max_elements = 1 << 30) {
  for (Tensor p : params) p.zero_grad();
  backward(loss_fn());
  GradCheckResult result;
  for (Tensor p : params) {
    const Eigen::VectorXd analytic = p.grad();
    auto values = p.mutable_values();
    const Index n = values.size();
    const Index stride = std::max<Index>(1, n / std::max<Index>(1, max_elements));
    for (Index i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + kFdStep;
      const double up = loss_fn().item();
      values[i] = saved - kFdStep;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * kFdStep);
      result.max_rel_error = std::max(result.max_rel_error, elementwise_error(analytic[i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

/// Weighted sum with fixed random weights, so the checked scalar depends on
/// every output element non-trivially.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::from(y.shape(), random_vector(y.numel(), rng), false);
  return sum(mul(y, w));
}

}  // namespace evfuse::testing

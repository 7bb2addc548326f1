#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace evfuse {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when operand shapes are incompatible. The message names the offending axes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the gradient tape (non-scalar loss, detached loss, double backward).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NaN or Inf surfaced by a validation call.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;  // empty until first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Receives the node itself; accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Eigen::VectorXd& ensure_grad() {
    if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// N-dimensional f64 array participating in reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage and tape node.
/// Values are immutable once produced by an op; only leaves (parameters) are
/// updated in place, by the optimizer, between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, Eigen::VectorXd data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const;

  Eigen::Map<const Eigen::VectorXd> values() const;
  /// In-place access for leaves only (optimizer updates, checkpoint loads).
  Eigen::Map<Eigen::VectorXd> mutable_values();
  double item() const;
  double at(std::initializer_list<Index> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  Eigen::VectorXd grad() const;
  void zero_grad();

  /// Throws NumericError if any value is non-finite.
  void validate_finite(std::string_view what) const;

  /// Same values, cut from the tape.
  Tensor detach() const;

  const char* op_name() const;

  // Engine internals.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse accumulation from a rank-0 loss, visiting nodes in exact
/// reverse execution order. A graph can be differentiated once.
void backward(const Tensor& loss);

// ---- differentiable operations -------------------------------------------

/// Cross-correlation with bias; weight is [Cout, Cin, k, k], k in {1, 3}.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// x * Phi(x) with the erf-based normal CDF.
Tensor gelu(const Tensor& x);

Tensor channel_concat(const Tensor& a, const Tensor& b);
/// Channels [begin, begin + count) of an [N, C, H, W] map.
Tensor channel_slice(const Tensor& x, Index begin, Index count);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor square(const Tensor& x);
Tensor log(const Tensor& x);

/// Softmax over the H*W positions of each (n, c) slice.
Tensor spatial_softmax(const Tensor& x);
/// [N, C, H, W] -> [N, C].
Tensor global_avg_pool(const Tensor& x);
/// x [N, Fin], w [Fout, Fin], b [Fout] -> [N, Fout].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace evfuse

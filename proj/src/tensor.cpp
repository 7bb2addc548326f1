#include "evfuse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace evfuse {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

std::atomic<std::uint64_t> g_sequence{0};

NodePtr make_leaf(Shape shape, Eigen::VectorXd data, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " + std::to_string(data.size()) +
                         " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_sequence.fetch_add(1);
  return node;
}

// Output node of an op. requires_grad propagates from any parent.
NodePtr make_result(const char* op, Shape shape, Eigen::VectorXd value, std::vector<NodePtr> parents) {
  auto node = make_leaf(std::move(shape), std::move(value), false);
  node->op = op;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) node->parents = std::move(parents);
  return node;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

void require_rank(const Tensor& t, Index rank, const char* op, const char* arg) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Column-major patch matrix for one sample: rows are output pixels, columns
// are (ci, ky, kx) taps. Out-of-image taps read as zero.
void im2col(const double* image, Index channels, Index height, Index width, int k, int stride, int padding,
            Index out_h, Index out_w, Eigen::Ref<Eigen::MatrixXd> patches) {
  for (Index c = 0; c < channels; ++c) {
    const double* plane = image + c * height * width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* col = patches.col((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - padding + ky;
          double* dst = col + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* row = plane + iy * width;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - padding + kx;
            dst[ox] = (ix >= 0 && ix < width) ? row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const Eigen::Ref<const Eigen::MatrixXd>& patches, Index channels, Index height, Index width, int k,
            int stride, int padding, Index out_h, Index out_w, double* image_grad) {
  for (Index c = 0; c < channels; ++c) {
    double* plane = image_grad + c * height * width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* col = patches.col((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= height) continue;
          double* row = plane + iy * width;
          const double* src = col + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - padding + kx;
            if (ix >= 0 && ix < width) row[ix] += src[ox];
          }
        }
      }
    }
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), Eigen::VectorXd::Zero(n), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), Eigen::VectorXd::Constant(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, Eigen::VectorXd data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({}, Eigen::VectorXd::Constant(1, value), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return node_->shape;
}

Index Tensor::dim(Index axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<Index>(s.size());
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

Index Tensor::numel() const { return node_ ? node_->value.size() : 0; }

Eigen::Map<const Eigen::VectorXd> Tensor::values() const {
  if (!node_) throw std::logic_error("undefined tensor");
  return {node_->value.data(), node_->value.size()};
}

Eigen::Map<Eigen::VectorXd> Tensor::mutable_values() {
  if (!node_) throw std::logic_error("undefined tensor");
  if (!node_->parents.empty() || node_->backward_fn) {
    throw AutodiffError("mutable_values() is only allowed on leaf tensors");
  }
  return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match " + shape_string(s));
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= s[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

Eigen::VectorXd Tensor::grad() const {
  if (!node_) throw std::logic_error("undefined tensor");
  if (has_grad()) return node_->grad;
  return Eigen::VectorXd::Zero(node_->value.size());
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad = Eigen::VectorXd::Zero(node_->value.size());
}

void Tensor::validate_finite(std::string_view what) const {
  const auto& v = node_->value;
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << v[i] << " at flat index " << i << " (op " << node_->op << ", shape "
         << shape_string(node_->shape) << ")";
      throw NumericError(os.str());
    }
  }
}

Tensor Tensor::detach() const { return Tensor::from(shape(), node_->value, false); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw AutodiffError("backward: loss must be rank-0, got " + shape_string(loss.shape()));
  }
  const NodePtr& root = loss.node();
  if (!root->requires_grad) throw AutodiffError("backward: loss is detached from every parameter");
  if (root->backward_done) throw AutodiffError("backward: graph already differentiated; rebuild the forward pass");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  // Sequence numbers are assigned at execution, so descending seq is the
  // exact reverse of the forward pass.
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  root->ensure_grad()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  root->backward_done = true;
}

// ---- ops ------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0);
  const Index k = weight.dim(2);
  if (weight.dim(3) != k) throw DimensionError("conv2d: kernel must be square, weight axes 2,3 are " + shape_string(weight.shape()));
  if (k != 1 && k != 3) throw DimensionError("conv2d: kernel size on weight axes 2,3 must be 1 or 3");
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: input axis 1 (channels=" + std::to_string(cin) + ") does not match weight axis 1 (" +
                         std::to_string(weight.dim(1)) + ")");
  }
  if (bias.dim(0) != cout) {
    throw DimensionError("conv2d: bias axis 0 (" + std::to_string(bias.dim(0)) + ") does not match weight axis 0 (" +
                         std::to_string(cout) + ")");
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  const Index num_h = h + 2 * padding - k, num_w = w + 2 * padding - k;
  if (num_h < 0 || num_w < 0) throw DimensionError("conv2d: input axes 2,3 smaller than kernel");
  const Index out_h = num_h / stride + 1, out_w = num_w / stride + 1;
  const Index in_plane = h * w, out_plane = out_h * out_w, taps = cin * k * k;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);
  const int ki = static_cast<int>(k);

  // Weight [Cout, Cin*k*k] row-major is the column-major (taps x Cout) matrix.
  Eigen::Map<const Eigen::MatrixXd> wmat(weight.node()->value.data(), taps, cout);
  const auto& x = input.node()->value;
  const auto& b = bias.node()->value;

  Eigen::VectorXd out(n * cout * out_plane);
  auto patches = std::make_shared<std::vector<Eigen::MatrixXd>>();
  if (!pointwise) patches->resize(static_cast<std::size_t>(n));
  for (Index s = 0; s < n; ++s) {
    Eigen::Map<Eigen::MatrixXd> y(out.data() + s * cout * out_plane, out_plane, cout);
    if (pointwise) {
      Eigen::Map<const Eigen::MatrixXd> xs(x.data() + s * cin * in_plane, in_plane, cin);
      y.noalias() = xs * wmat;
    } else {
      auto& p = (*patches)[static_cast<std::size_t>(s)];
      p.resize(out_plane, taps);
      im2col(x.data() + s * cin * in_plane, cin, h, w, ki, stride, padding, out_h, out_w, p);
      y.noalias() = p * wmat;
    }
    y.rowwise() += b.transpose();
  }

  auto node = make_result("conv2d", {n, cout, out_h, out_w}, std::move(out),
                          {input.node(), weight.node(), bias.node()});
  if (node->requires_grad) {
    node->backward_fn = [=](Node& self) {
      const NodePtr& xin = self.parents[0];
      const NodePtr& wt = self.parents[1];
      const NodePtr& bs = self.parents[2];
      Eigen::Map<const Eigen::MatrixXd> wm(wt->value.data(), taps, cout);
      for (Index s = 0; s < n; ++s) {
        Eigen::Map<const Eigen::MatrixXd> gy(self.grad.data() + s * cout * out_plane, out_plane, cout);
        if (bs->requires_grad) bs->ensure_grad() += gy.colwise().sum().transpose();
        if (pointwise) {
          Eigen::Map<const Eigen::MatrixXd> xs(xin->value.data() + s * cin * in_plane, in_plane, cin);
          if (wt->requires_grad) {
            Eigen::Map<Eigen::MatrixXd> gw(wt->ensure_grad().data(), taps, cout);
            gw.noalias() += xs.transpose() * gy;
          }
          if (xin->requires_grad) {
            Eigen::Map<Eigen::MatrixXd> gx(xin->ensure_grad().data() + s * cin * in_plane, in_plane, cin);
            gx.noalias() += gy * wm.transpose();
          }
        } else {
          const auto& p = (*patches)[static_cast<std::size_t>(s)];
          if (wt->requires_grad) {
            Eigen::Map<Eigen::MatrixXd> gw(wt->ensure_grad().data(), taps, cout);
            gw.noalias() += p.transpose() * gy;
          }
          if (xin->requires_grad) {
            Eigen::MatrixXd gp = gy * wm.transpose();
            col2im(gp, cin, h, w, ki, stride, padding, out_h, out_w, xin->ensure_grad().data() + s * cin * in_plane);
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const auto& v = x.node()->value;
  auto cdf = std::make_shared<Eigen::ArrayXd>(v.size());
  for (Index i = 0; i < v.size(); ++i) (*cdf)[i] = 0.5 * std::erfc(-v[i] * kInvSqrt2);
  Eigen::VectorXd out = (v.array() * *cdf).matrix();
  auto node = make_result("gelu", x.shape(), std::move(out), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [cdf](Node& self) {
      const NodePtr& in = self.parents[0];
      const auto z = in->value.array();
      in->ensure_grad().array() += self.grad.array() * (*cdf + z * kInvSqrt2Pi * (-0.5 * z.square()).exp());
    };
  }
  return Tensor(node);
}

Tensor channel_concat(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "channel_concat", "a");
  require_rank(b, 4, "channel_concat", "b");
  for (Index axis : {0, 2, 3}) {
    if (a.dim(axis) != b.dim(axis)) {
      throw DimensionError("channel_concat: axis " + std::to_string(axis) + " differs (" + shape_string(a.shape()) +
                           " vs " + shape_string(b.shape()) + ")");
    }
  }
  const Index n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Eigen::VectorXd out(n * (ca + cb) * plane);
  for (Index s = 0; s < n; ++s) {
    out.segment(s * (ca + cb) * plane, ca * plane) = a.node()->value.segment(s * ca * plane, ca * plane);
    out.segment((s * (ca + cb) + ca) * plane, cb * plane) = b.node()->value.segment(s * cb * plane, cb * plane);
  }
  auto node = make_result("channel_concat", {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward_fn = [=](Node& self) {
      const NodePtr& pa = self.parents[0];
      const NodePtr& pb = self.parents[1];
      for (Index s = 0; s < n; ++s) {
        if (pa->requires_grad) {
          pa->ensure_grad().segment(s * ca * plane, ca * plane) += self.grad.segment(s * (ca + cb) * plane, ca * plane);
        }
        if (pb->requires_grad) {
          pb->ensure_grad().segment(s * cb * plane, cb * plane) +=
              self.grad.segment((s * (ca + cb) + ca) * plane, cb * plane);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor channel_slice(const Tensor& x, Index begin, Index count) {
  require_rank(x, 4, "channel_slice", "x");
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin < 0 || count <= 0 || begin + count > c) {
    throw DimensionError("channel_slice: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") outside axis 1 of " + shape_string(x.shape()));
  }
  Eigen::VectorXd out(n * count * plane);
  for (Index s = 0; s < n; ++s) {
    out.segment(s * count * plane, count * plane) = x.node()->value.segment((s * c + begin) * plane, count * plane);
  }
  auto node = make_result("channel_slice", {n, count, x.dim(2), x.dim(3)}, std::move(out), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [=](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (Index s = 0; s < n; ++s) {
        g.segment((s * c + begin) * plane, count * plane) += self.grad.segment(s * count * plane, count * plane);
      }
    };
  }
  return Tensor(node);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto node = make_result("add", a.shape(), a.node()->value + b.node()->value, {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      for (const auto& p : self.parents) {
        if (p->requires_grad) p->ensure_grad() += self.grad;
      }
    };
  }
  return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto node = make_result("sub", a.shape(), a.node()->value - b.node()->value, {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      if (self.parents[0]->requires_grad) self.parents[0]->ensure_grad() += self.grad;
      if (self.parents[1]->requires_grad) self.parents[1]->ensure_grad() -= self.grad;
    };
  }
  return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Eigen::VectorXd out = a.node()->value.cwiseProduct(b.node()->value);
  auto node = make_result("mul", a.shape(), std::move(out), {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      const NodePtr& pa = self.parents[0];
      const NodePtr& pb = self.parents[1];
      if (pa->requires_grad) pa->ensure_grad() += self.grad.cwiseProduct(pb->value);
      if (pb->requires_grad) pb->ensure_grad() += self.grad.cwiseProduct(pa->value);
    };
  }
  return Tensor(node);
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  auto node = make_result("scale", x.shape(), x.node()->value * factor, {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [factor](Node& self) { self.parents[0]->ensure_grad() += factor * self.grad; };
  }
  return Tensor(node);
}

Tensor add_scalar(const Tensor& x, double offset) {
  require_defined(x, "add_scalar");
  Eigen::VectorXd out = x.node()->value.array() + offset;
  auto node = make_result("add_scalar", x.shape(), std::move(out), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) { self.parents[0]->ensure_grad() += self.grad; };
  }
  return Tensor(node);
}

Tensor square(const Tensor& x) {
  require_defined(x, "square");
  auto node = make_result("square", x.shape(), x.node()->value.array().square().matrix(), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      const NodePtr& in = self.parents[0];
      in->ensure_grad() += 2.0 * self.grad.cwiseProduct(in->value);
    };
  }
  return Tensor(node);
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  const auto& v = x.node()->value;
  if (v.size() > 0 && !(v.minCoeff() > 0.0)) throw NumericError("log: input must be strictly positive");
  auto node = make_result("log", x.shape(), v.array().log().matrix(), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) {
      const NodePtr& in = self.parents[0];
      in->ensure_grad().array() += self.grad.array() / in->value.array();
    };
  }
  return Tensor(node);
}

Tensor spatial_softmax(const Tensor& x) {
  require_rank(x, 4, "spatial_softmax", "x");
  const Index slices = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto& v = x.node()->value;
  Eigen::VectorXd out(v.size());
  for (Index s = 0; s < slices; ++s) {
    auto in = v.segment(s * plane, plane);
    auto o = out.segment(s * plane, plane);
    const double peak = in.maxCoeff();
    o = (in.array() - peak).exp().matrix();
    double total = 0.0;
    for (Index i = 0; i < plane; ++i) total += o[i];
    o /= total;
  }
  auto node = make_result("spatial_softmax", x.shape(), std::move(out), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [slices, plane](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (Index s = 0; s < slices; ++s) {
        auto y = self.value.segment(s * plane, plane);
        auto gy = self.grad.segment(s * plane, plane);
        double dot = 0.0;
        for (Index i = 0; i < plane; ++i) dot += y[i] * gy[i];
        g.segment(s * plane, plane).array() += y.array() * (gy.array() - dot);
      }
    };
  }
  return Tensor(node);
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "x");
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto& v = x.node()->value;
  Eigen::VectorXd out(n * c);
  for (Index s = 0; s < n * c; ++s) {
    double total = 0.0;
    for (Index i = 0; i < plane; ++i) total += v[s * plane + i];
    out[s] = total / static_cast<double>(plane);
  }
  auto node = make_result("global_avg_pool", {n, c}, std::move(out), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [n, c, plane](Node& self) {
      auto& g = self.parents[0]->ensure_grad();
      const double inv = 1.0 / static_cast<double>(plane);
      for (Index s = 0; s < n * c; ++s) g.segment(s * plane, plane).array() += self.grad[s] * inv;
    };
  }
  return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear", "x");
  require_rank(w, 2, "linear", "w");
  require_rank(b, 1, "linear", "b");
  const Index n = x.dim(0), fin = x.dim(1), fout = w.dim(0);
  if (w.dim(1) != fin) {
    throw DimensionError("linear: x axis 1 (" + std::to_string(fin) + ") does not match w axis 1 (" +
                         std::to_string(w.dim(1)) + ")");
  }
  if (b.dim(0) != fout) throw DimensionError("linear: b axis 0 does not match w axis 0");
  // Row-major [N, Fin] and [Fout, Fin] are column-major transposes.
  Eigen::Map<const Eigen::MatrixXd> xt(x.node()->value.data(), fin, n);
  Eigen::Map<const Eigen::MatrixXd> wt(w.node()->value.data(), fin, fout);
  Eigen::VectorXd out(n * fout);
  Eigen::Map<Eigen::MatrixXd> yt(out.data(), fout, n);
  yt.noalias() = wt.transpose() * xt;
  yt.colwise() += b.node()->value;
  auto node = make_result("linear", {n, fout}, std::move(out), {x.node(), w.node(), b.node()});
  if (node->requires_grad) {
    node->backward_fn = [n, fin, fout](Node& self) {
      const NodePtr& px = self.parents[0];
      const NodePtr& pw = self.parents[1];
      const NodePtr& pb = self.parents[2];
      Eigen::Map<const Eigen::MatrixXd> gyt(self.grad.data(), fout, n);
      if (pb->requires_grad) pb->ensure_grad() += gyt.rowwise().sum();
      if (pw->requires_grad) {
        Eigen::Map<const Eigen::MatrixXd> xt2(px->value.data(), fin, n);
        Eigen::Map<Eigen::MatrixXd> gwt(pw->ensure_grad().data(), fin, fout);
        gwt.noalias() += xt2 * gyt.transpose();
      }
      if (px->requires_grad) {
        Eigen::Map<const Eigen::MatrixXd> wt2(pw->value.data(), fin, fout);
        Eigen::Map<Eigen::MatrixXd> gxt(px->ensure_grad().data(), fin, n);
        gxt.noalias() += wt2 * gyt;
      }
    };
  }
  return Tensor(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
  }
  auto node = make_result("reshape", std::move(shape), x.node()->value, {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) { self.parents[0]->ensure_grad() += self.grad; };
  }
  return Tensor(node);
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  const auto& v = x.node()->value;
  for (Index i = 0; i < v.size(); ++i) total += v[i];
  auto node = make_result("sum", {}, Eigen::VectorXd::Constant(1, total), {x.node()});
  if (node->requires_grad) {
    node->backward_fn = [](Node& self) { self.parents[0]->ensure_grad().array() += self.grad[0]; };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

}  // namespace evfuse

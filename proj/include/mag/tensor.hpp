#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mag/error.hpp"

#ifndef MAG_SCALAR
#define MAG_SCALAR float
#endif

namespace mag {

// f32 by default; grad-check builds may define MAG_SCALAR=double.
using Scalar = MAG_SCALAR;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Shape = std::array<int, 2>;

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

inline thread_local bool grad_enabled = true;
#ifdef NDEBUG
inline thread_local bool finite_checks = false;
#else
inline thread_local bool finite_checks = true;
#endif

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

// When on, every op result is scanned for NaN/Inf and a NumericError names
// the offending op. On by default in debug builds.
inline void set_finite_checks(bool on) { detail::finite_checks = on; }
inline bool finite_checks() { return detail::finite_checks; }

class Tensor;
inline Tensor make_result(const char* op, Matrix value, std::initializer_list<Tensor> parents,
                          std::function<void(detail::Node&)> backward);

/// Immutable 2-D f32 tensor with optional reverse-mode gradient tracking.
/// Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    return Tensor(std::move(node));
  }

  static Tensor parameter(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Tensor(std::move(node));
  }

  static Tensor zeros(int rows, int cols) { return constant(Matrix::Zero(rows, cols)); }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return static_cast<int>(node_->value.rows()); }
  int cols() const { return static_cast<int>(node_->value.cols()); }
  Shape shape() const { return {rows(), cols()}; }
  std::size_t numel() const { return static_cast<std::size_t>(node_->value.size()); }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Scalar item() const { return node_->value(0, 0); }
  const char* op() const { return node_->op; }

  // Parameter mutation for optimizers and checkpoint loading only.
  Matrix& mutable_value() { return node_->value; }
  void zero_grad() { node_->grad.resize(0, 0); }

  // A constant copy of the value, cut from the graph.
  Tensor detach() const { return constant(node_->value); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(const char*, Matrix, std::initializer_list<Tensor>,
                            std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

inline Tensor make_result(const char* op, Matrix value, std::initializer_list<Tensor> parents,
                          std::function<void(detail::Node&)> backward) {
  if (detail::finite_checks && !value.allFinite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (detail::grad_enabled) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Runs reverse-mode accumulation from a scalar (1x1) tensor.
inline void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward() needs a 1x1 loss");
  if (!loss.requires_grad()) return;
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

namespace detail {
inline void push(Node& self, std::size_t i, const Matrix& g) {
  if (self.parents[i]->requires_grad) self.parents[i]->accumulate(g);
}
inline bool wants(Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

inline void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return make_result("matmul", std::move(out), {a, b}, [](detail::Node& self) {
    const Matrix& A = self.parents[0]->value;
    const Matrix& B = self.parents[1]->value;
    if (detail::wants(self, 0)) detail::push(self, 0, self.grad * B.transpose());
    if (detail::wants(self, 1)) detail::push(self, 1, A.transpose() * self.grad);
  });
}

// x (n x in) * w (in x out) + b (1 x out)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("linear: incompatible shapes");
  }
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return make_result("linear", std::move(out), {x, w, b}, [](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    const Matrix& W = self.parents[1]->value;
    if (detail::wants(self, 0)) detail::push(self, 0, self.grad * W.transpose());
    if (detail::wants(self, 1)) detail::push(self, 1, X.transpose() * self.grad);
    if (detail::wants(self, 2)) detail::push(self, 2, self.grad.colwise().sum());
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "add");
  return make_result("add", a.value() + b.value(), {a, b}, [](detail::Node& self) {
    detail::push(self, 0, self.grad);
    detail::push(self, 1, self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "sub");
  return make_result("sub", a.value() - b.value(), {a, b}, [](detail::Node& self) {
    detail::push(self, 0, self.grad);
    if (detail::wants(self, 1)) detail::push(self, 1, -self.grad);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "mul");
  return make_result("mul", a.value().cwiseProduct(b.value()), {a, b}, [](detail::Node& self) {
    if (detail::wants(self, 0)) detail::push(self, 0, self.grad.cwiseProduct(self.parents[1]->value));
    if (detail::wants(self, 1)) detail::push(self, 1, self.grad.cwiseProduct(self.parents[0]->value));
  });
}

inline Tensor scale(const Tensor& a, Scalar s) {
  return make_result("scale", a.value() * s, {a}, [s](detail::Node& self) {
    detail::push(self, 0, self.grad * s);
  });
}

// a + s * b, fused for the Euler update x <- x + dt * v.
inline Tensor axpy(const Tensor& a, Scalar s, const Tensor& b) {
  detail::check_same(a, b, "axpy");
  return make_result("axpy", a.value() + s * b.value(), {a, b}, [s](detail::Node& self) {
    detail::push(self, 0, self.grad);
    if (detail::wants(self, 1)) detail::push(self, 1, self.grad * s);
  });
}

// Adds row vector b (1 x n) to every row of a.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return make_result("add_row", std::move(out), {a, b}, [](detail::Node& self) {
    detail::push(self, 0, self.grad);
    if (detail::wants(self, 1)) detail::push(self, 1, self.grad.colwise().sum());
  });
}

inline Tensor silu(const Tensor& x) {
  Matrix sig = (Scalar(1) + (-x.value().array()).exp()).inverse().matrix();
  Matrix out = x.value().cwiseProduct(sig);
  return make_result("silu", std::move(out), {x}, [sig = std::move(sig)](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    Matrix d = (sig.array() * (Scalar(1) + X.array() * (Scalar(1) - sig.array()))).matrix();
    detail::push(self, 0, self.grad.cwiseProduct(d));
  });
}

// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  const Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar c = Scalar(0.044715);
  const auto X = x.value().array();
  Matrix th = (k * (X + c * X.cube())).tanh().matrix();
  Matrix out = (Scalar(0.5) * X * (Scalar(1) + th.array())).matrix();
  return make_result("gelu", std::move(out), {x}, [th = std::move(th), k, c](detail::Node& self) {
    const auto X = self.parents[0]->value.array();
    const auto T = th.array();
    auto d = Scalar(0.5) * (Scalar(1) + T) +
             Scalar(0.5) * X * (Scalar(1) - T.square()) * k * (Scalar(1) + Scalar(3) * c * X.square());
    detail::push(self, 0, (self.grad.array() * d).matrix());
  });
}

/// Row-wise layer normalization without affine parameters.
inline Tensor layer_norm(const Tensor& x, Scalar eps = Scalar(1e-6)) {
  const Matrix& X = x.value();
  const int n = static_cast<int>(X.rows());
  const Scalar d = static_cast<Scalar>(X.cols());
  Matrix xhat(X.rows(), X.cols());
  Vector inv_std(n);
  for (int i = 0; i < n; ++i) {
    const Scalar mean = X.row(i).mean();
    const Scalar var = (X.row(i).array() - mean).square().sum() / d;
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = xhat;
  return make_result("layer_norm", std::move(out), {x},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), d](detail::Node& self) {
                       const Matrix& G = self.grad;
                       Matrix dx(G.rows(), G.cols());
                       for (int i = 0; i < G.rows(); ++i) {
                         const Scalar mg = G.row(i).mean();
                         const Scalar mgx = G.row(i).dot(xhat.row(i)) / d;
                         dx.row(i) = inv_std(i) * (G.row(i).array() - mg - xhat.row(i).array() * mgx);
                       }
                       detail::push(self, 0, dx);
                     });
}

/// x * (1 + scale) + shift, all the same shape (adaptive norm modulation).
inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scl) {
  detail::check_same(x, shift, "modulate");
  detail::check_same(x, scl, "modulate");
  Matrix out = (x.value().array() * (Scalar(1) + scl.value().array()) + shift.value().array()).matrix();
  return make_result("modulate", std::move(out), {x, shift, scl}, [](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    const Matrix& S = self.parents[2]->value;
    if (detail::wants(self, 0)) detail::push(self, 0, (self.grad.array() * (Scalar(1) + S.array())).matrix());
    detail::push(self, 1, self.grad);
    if (detail::wants(self, 2)) detail::push(self, 2, self.grad.cwiseProduct(X));
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

/// Output row i is table row indices[i]; gradient scatters back.
inline Tensor gather_rows(const Tensor& table, std::vector<int> indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= table.rows()) throw BoundsError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(r);
  }
  return make_result("gather_rows", std::move(out), {table},
                     [idx = std::move(indices)](detail::Node& self) {
                       const Matrix& T = self.parents[0]->value;
                       Matrix g = Matrix::Zero(T.rows(), T.cols());
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
                       }
                       detail::push(self, 0, g);
                     });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int cols = parts.front().cols();
  int rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  int at = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  // make_result takes an initializer_list; build the node by hand for N parents.
  if (detail::finite_checks && !out.allFinite()) throw NumericError("non-finite value produced by op 'concat_rows'");
  Tensor result = make_result("concat_rows", std::move(out), {}, nullptr);
  bool track = false;
  if (detail::grad_enabled) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  if (track) {
    auto& node = *result.node();
    node.requires_grad = true;
    for (const auto& p : parts) node.parents.push_back(p.node());
    node.backward = [offsets = std::move(offsets)](detail::Node& self) {
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        auto& parent = *self.parents[i];
        if (parent.requires_grad) parent.accumulate(self.grad.middleRows(offsets[i], parent.value.rows()));
      }
    };
  }
  return result;
}

inline Tensor slice_rows(const Tensor& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw BoundsError("slice_rows: out of range");
  Matrix out = x.value().middleRows(begin, count);
  return make_result("slice_rows", std::move(out), {x}, [begin, count](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    Matrix g = Matrix::Zero(X.rows(), X.cols());
    g.middleRows(begin, count) = self.grad;
    detail::push(self, 0, g);
  });
}

inline Tensor slice_cols(const Tensor& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw BoundsError("slice_cols: out of range");
  Matrix out = x.value().middleCols(begin, count);
  return make_result("slice_cols", std::move(out), {x}, [begin, count](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    Matrix g = Matrix::Zero(X.rows(), X.cols());
    g.middleCols(begin, count) = self.grad;
    detail::push(self, 0, g);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return 1x1).

inline Tensor sum(const Tensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make_result("sum", std::move(out), {x}, [](detail::Node& self) {
    const Matrix& X = self.parents[0]->value;
    detail::push(self, 0, Matrix::Constant(X.rows(), X.cols(), self.grad(0, 0)));
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel())); }

/// mean((pred - target)^2) with target treated as a constant.
inline Tensor mse_loss(const Tensor& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse_loss: shape mismatch");
  Matrix diff = pred.value() - target;
  const Scalar n = static_cast<Scalar>(diff.size());
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return make_result("mse_loss", std::move(out), {pred}, [diff = std::move(diff), n](detail::Node& self) {
    detail::push(self, 0, diff * (Scalar(2) * self.grad(0, 0) / n));
  });
}

/// sum(x * direction) * s with direction held constant (a stop-gradient inner product).
inline Tensor dot_constant(const Tensor& x, const Matrix& direction, Scalar s = Scalar(1)) {
  if (x.rows() != direction.rows() || x.cols() != direction.cols()) throw ShapeError("dot_constant: shape mismatch");
  Matrix out(1, 1);
  out(0, 0) = x.value().cwiseProduct(direction).sum() * s;
  return make_result("dot_constant", std::move(out), {x}, [direction, s](detail::Node& self) {
    detail::push(self, 0, direction * (s * self.grad(0, 0)));
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace mag

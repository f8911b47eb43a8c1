#pragma once

#include <Eigen/SparseCore>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stgcn/rng.hpp"
#include "stgcn/tensor.hpp"

namespace stgcn {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

namespace ad {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  Tensor* sink = nullptr;  // leaves only: where the gradient is accumulated
  bool requires_grad = false;

  Tensor& grad_ref() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

/// Handle to a value in a reverse-mode computation graph. Each graph is
/// owned by its output handles; there is no global tape.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  /// Differentiable leaf. After backward(), its gradient is added into
  /// `*grad_sink` (which must have the same shape and outlive the call).
  static Var leaf(Tensor value, Tensor* grad_sink);

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  /// Gradient of the last backward() pass with respect to this value.
  const Tensor& grad() const { return node_->grad; }

  /// Reverse pass seeded with ones; the value must hold a single element.
  void backward() const;
  void backward(const Tensor& seed) const;

 private:
  std::shared_ptr<Node> node_;
};

// Primitive operations. Every forward checks its output for NaN/Inf and throws
// NonFiniteValue naming the op.

/// [..., k] x [k, n] -> [..., n]; leading axes of `a` are treated as rows.
Var matmul(const Var& a, const Var& b);
/// Applies an n x n sparse matrix along the second-to-last axis of x[..., n, C].
Var sparse_dense_matmul(std::shared_ptr<const SparseMatrix> s, const Var& x);
Var add(const Var& a, const Var& b);
Var scalar_mul(const Var& x, double c);
/// x times a differentiable single-element tensor.
Var scale_by(const Var& x, const Var& s);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, std::size_t begin, std::size_t end);
Var reshape(const Var& x, Shape shape);
Var transpose(const Var& x);
/// Same-padded cross-correlation along axis 1: x[B,T,M,Cin], w[kt,Cin,Cout]
/// (kt odd) -> [B,T,M,Cout]; out[b,t] = sum_k x[b, t+k-kt/2] w[k].
Var conv1d_same(const Var& x, const Var& w);
/// Single-channel convenience form: signal[T], kernel[kt] -> [T].
Var conv1d_same_1d(const Var& signal, const Var& kernel);
Var sigmoid(const Var& x);
Var elementwise_mul(const Var& a, const Var& b);
/// Normalizes to zero mean / unit variance along `axis` (population variance).
Var layer_norm(const Var& x, int axis, double eps);
/// x * gamma + beta, with gamma and beta broadcast over the last axis.
Var scale_shift(const Var& x, const Var& gamma, const Var& beta);
/// Mean along `axis`; the axis is removed from the output shape.
Var mean_over_axis(const Var& x, int axis);
Var abs_forward(const Var& x);
Var softmax(const Var& x, int axis);
/// Inverted dropout; identity when !training or rate == 0.
Var dropout(const Var& x, double rate, bool training, Rng& rng);
Var sum_all(const Var& x);
/// Mean cross-entropy of logits[B,C] against integer class labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

/// Gated linear unit over the last axis: first half * sigmoid(second half).
Var glu(const Var& x);

}  // namespace ad
}  // namespace stgcn

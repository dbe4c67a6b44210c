// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over memprop::Tensor.
// Every op records its inputs and a closure that pushes the output gradient
// back into them; backward() walks the graph in reverse topological order.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "memprop/tensor.hpp"

namespace memprop {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward_fn;
};

/// Returns the gradient buffer of `node`, allocating zeros on first use.
Tensor& grad_buffer(Node& node);

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor(); }

  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds an op result. Inputs and the closure are dropped when gradient
/// recording is off or no input requires a gradient.
Var make_var(Tensor value, std::vector<Var> inputs, BackwardFn fn);

/// Seeds d(root)/d(root) = 1 (root must hold a single element) and
/// accumulates gradients into every reachable node that requires one.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace ag {

Var constant(Tensor t);
Var parameter(Tensor t);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a * b where every dim of b equals the matching dim of a or is 1.
Var mul_bcast(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var reshape(const Var& a, Shape shape);
Var sum(const Var& a);
Var mean(const Var& a);
Var add_all(std::span<const Var> terms);

Var concat(std::span<const Var> parts, int axis);
inline Var concat(std::initializer_list<Var> parts, int axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

/// 2-D convolution, zero padding. x: [N,Ci,H,W], w: [Co,Ci,kh,kw], b: [Co].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// Mean over non-overlapping factor x factor blocks ("area" resampling).
Var avg_pool(const Var& x, int factor);
/// Bilinear x2 upsampling with half-pixel centers and edge clamping.
Var upsample_bilinear2x(const Var& x);

/// [N,C,H,W] -> [N,H*W,C]
Var to_tokens(const Var& x);
/// [N,H*W,C] -> [N,C,H,W]
Var from_tokens(const Var& t, int height, int width);
/// Token-wise affine map. x: [N,T,Ci], w: [Ci,Co], b: [Co].
Var linear(const Var& x, const Var& w, const Var& b);
/// Batched a[N,p,q] * b[N,q,r].
Var bmm(const Var& a, const Var& b);
/// Batched a[N,p,q] * b[N,r,q]^T.
Var bmm_nt(const Var& a, const Var& b);
/// -scale * ||q_i - k_j||^2 for q: [N,p,c], k: [N,r,c] -> [N,p,r].
Var neg_sq_dist(const Var& q, const Var& k, double scale);
Var softmax_last(const Var& x);

// Fixed linear image operators used by the pyramid loss.
Var blur5_reflect(const Var& x);
Var subsample2(const Var& x);
/// Zero-insertion x2 upsampling with gain 4 (inverse of subsample2 up to blur).
Var zero_upsample2(const Var& x);
Var crop_even(const Var& x);

}  // namespace ag
}  // namespace memprop

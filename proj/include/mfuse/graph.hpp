#pragma once

#include <functional>
#include <initializer_list>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mfuse/rng.hpp"
#include "mfuse/tensor.hpp"

namespace mfuse {

/// Per-node gradients produced by Graph::backward.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  /// Gradient for a graph node; zeros when the loss does not depend on it.
  const Tensor& at(NodeId id) const;
  /// Gradient with respect to a tracked tensor.
  const Tensor& of(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

/// Reverse-mode tape.
///
/// Nodes are appended in execution order, so the append order is already a
/// topological order and backward walks it in reverse. A graph is single use:
/// build it, call backward once, throw it away.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a leaf. With track=false the value is returned untracked.
  Tensor leaf(const Tensor& value, bool track = true);

  /// a[..., m, k] x b[k, n] (b shared) or x b[..., k, n] (batched).
  /// With transpose_b the last two axes of b are swapped first.
  Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
  /// Elementwise with broadcasting: b may equal a's shape, be a suffix of
  /// a's shape, or equal a's shape with the last extent 1 (one scalar per
  /// row). The operands may be given in either order.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor concat(std::initializer_list<Tensor> parts) { return concat(std::span(parts.begin(), parts.size())); }
  Tensor concat(std::span<const Tensor> parts);

  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor tanh(const Tensor& x);
  /// Softmax over the last axis. `key_mask`, when given, has shape
  /// [x.dim(0), x.dim(-1)]; zero entries get exactly zero weight.
  Tensor softmax(const Tensor& x, const Tensor* key_mask = nullptr);
  /// Natural log with the input clamped to >= 1e-12.
  Tensor log(const Tensor& x);
  /// exp with the input clamped to <= 700.
  Tensor exp(const Tensor& x);
  /// Euclidean norm of the whole tensor, shape [1].
  Tensor l2_norm(const Tensor& x);
  /// Euclidean norm over the last axis, shape [..., 1].
  Tensor l2_norm_rows(const Tensor& x);
  /// 1/x, with 1/0 defined as 0.
  Tensor reciprocal(const Tensor& x);
  Tensor scalar_min(const Tensor& x, double c);
  Tensor scale(const Tensor& x, double c);
  Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
  Tensor reshape(const Tensor& x, Shape shape);
  /// Reductions drop the axis; a rank-1 input reduces to shape [1].
  Tensor mean(const Tensor& x, int axis);
  Tensor max(const Tensor& x, int axis);
  Tensor last(const Tensor& x, int axis);
  /// Row-wise flattened outer product: [B, da] x [B, db] -> [B, da*db].
  Tensor outer(const Tensor& a, const Tensor& b);
  /// table[V, d] gathered by ids -> [rows, cols, d].
  Tensor embedding(const Tensor& table, const IdMatrix& ids);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
  /// Inverted dropout. Identity when !train or p == 0.
  Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);
  /// x[B, L, Cin] * w[K, Cin, Cout] + b[Cout] over the time axis, zero
  /// 'same' padding, odd K.
  Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b);

  /// Convenience compositions.
  Tensor sum(const Tensor& x);
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

  /// Gradients of a one-element loss with respect to every node.
  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Smallest distance of any tracked input to a non-differentiable point
  /// seen so far: relu at 0, scalar_min at its cap, ties in max, norms and
  /// reciprocals at 0.
  /// Finite-difference checks are only meaningful when
  /// this is well above the step size.
  double kink_margin() const { return kink_margin_; }

 private:
  using Backward = std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

  struct Node {
    std::string_view kind;
    std::vector<std::optional<NodeId>> inputs;
    Shape shape;
    Backward backward;
  };

  Tensor record(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs, Backward fn);
  Tensor record(std::string_view kind, Tensor out, std::span<const Tensor> inputs, Backward fn);
  void check_open() const;

  void note_kink(const Tensor& x, double distance) {
    if (x.requires_grad() && distance < kink_margin_) kink_margin_ = distance;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace mfuse

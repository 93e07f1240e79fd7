#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rawshield/errors.hpp"

/// Minimal dense tensors with reverse-mode differentiation.
///
/// Tensors are cheap handles onto graph nodes. Every op that consumes a
/// tensor requiring gradients records its inputs and a backward rule; node
/// ids increase monotonically per thread, so the recorded graph is acyclic
/// by construction and `backward` replays it in reverse creation order.
/// Everything is templated on the scalar type: training runs in float,
/// finite-difference checks run in double.
namespace rawshield::ad {

using Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using BackwardFn = std::function<void(Node&)>;

  std::uint64_t id = 0;
  const char* op = "leaf";
  Shape shape;
  Array value;
  Array grad;  ///< empty until a gradient reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  /// grad += g, allocating on first use.
  void accumulate(const Array& g) {
    if (grad.size() == 0) grad = g;
    else grad += g;
  }
  Array& grad_buffer() {
    if (grad.size() == 0) grad = Array::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodeType = Node<Scalar>;
  using Array = typename NodeType::Array;

  Tensor() = default;
  /// Leaf tensor. Leaves that require gradients start with an all-zero grad.
  Tensor(Shape shape, Array value, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  /// Mutable storage, permitted on leaves only (optimizer updates, probes).
  Array& mutable_value();
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient after backward; zeros when none reached this tensor.
  Array grad() const;
  void zero_grad();

  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }

  /// Same value, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<NodeType> node_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op result. Checks the forward value for NaN/Inf, and records
/// `backward` only when recording is enabled and some input requires grad.
/// Backward rules read `self.grad` and accumulate into `self.inputs[i]`.
template <typename Scalar>
Tensor<Scalar> record_op(const char* op, Shape shape, typename Node<Scalar>::Array value,
                         std::initializer_list<Tensor<Scalar>> inputs,
                         typename Node<Scalar>::BackwardFn backward);

/// One entry of the recorded program, in creation order.
struct TapeEntry {
  std::uint64_t id;
  const char* op;
  std::vector<std::uint64_t> input_ids;
};

/// Nodes reachable from `root` that participate in differentiation, sorted by
/// creation order.
template <typename Scalar>
std::vector<TapeEntry> collect_tape(const Tensor<Scalar>& root);

/// Reverse-mode sweep from a scalar loss. Throws ShapeError for non-scalar
/// losses, Error when the loss is not on the tape, NumericFault naming the
/// node when a gradient turns non-finite.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

// ---- ops -----------------------------------------------------------------

/// Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,kh,kw] plus
/// bias[Cout] (bias may be undefined).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, int stride = 1, int padding = 0);

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& x, Scalar slope);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

/// [B,C,H,W] → [B,C,1,1]
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);
/// Non-overlapping k×k means; H and W must be divisible by k.
template <typename Scalar>
Tensor<Scalar> avg_pool(const Tensor<Scalar>& x, int k);
/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, int factor);

/// x[B,Din]·weightᵀ + bias, weight[Dout,Din], bias[Dout].
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

/// Max-shifted softmax over the last dimension.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x);

/// Broadcasting binary ops. Operands have equal rank (or one is a single
/// element); every extent matches the result or is 1.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// a·x + b elementwise with constant a, b.
template <typename Scalar>
Tensor<Scalar> scale_shift(const Tensor<Scalar>& x, Scalar a, Scalar b = Scalar(0));

/// Concatenate along dim 1.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// Slice [start, start+length) of dim 1.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index start, Index length);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape);
/// Broadcast x to `shape` (extents of x must be 1 or match).
template <typename Scalar>
Tensor<Scalar> expand(const Tensor<Scalar>& x, const Shape& shape);

enum class Reduction { Sum, Mean, L1, L2 };
/// Rank-0 result. The L1 subgradient at 0 is 0; the L2 gradient at 0 is 0.
template <typename Scalar>
Tensor<Scalar> reduce(const Tensor<Scalar>& x, Reduction kind);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) { return reduce(x, Reduction::Sum); }
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) { return reduce(x, Reduction::Mean); }

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& x) { return scale_shift(x, s); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& x, Scalar s) { return scale_shift(x, s); }
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& x, Scalar s) { return scale_shift(x, Scalar(1), s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& x) { return scale_shift(x, Scalar(-1)); }

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Converts between scalar instantiations (value only, no graph).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x, bool requires_grad = false) {
  return Tensor<To>(x.shape(), x.value().template cast<To>(), requires_grad);
}

}  // namespace rawshield::ad

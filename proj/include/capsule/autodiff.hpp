#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "capsule/tensor.hpp"

namespace capsule {

class Tape;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Sigmoid,
  Clamp,
  Log,
  Matmul,
  Conv2d,
  ChannelBias,
  Softmax,
  ReduceSum,
  Norm,
  Squash,
  Gather,
  CapsuleTransform,
  WeightedSum,
  Agreement,
  Count
};

const char* op_name(OpKind kind);

/// Handle to a value recorded on a Tape.
class Var {
public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar loss with respect to every requires_grad leaf.
class Gradients {
public:
  /// Gradient for a leaf; all-zero when the loss does not depend on it.
  Tensor operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const;

private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
  std::unordered_map<std::size_t, Shape> shapes_;
};

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// so operands always precede their consumers. Not thread-safe; one tape per
/// forward/backward pass.
class Tape {
public:
  /// Receives the gradient of the node's output and one writable span per
  /// operand (empty when that operand does not require a gradient). Rules
  /// accumulate (+=) into the operand spans.
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<std::span<double>> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op. The rule is dropped when no operand requires a gradient.
  Var record(OpKind kind, Tensor value, std::vector<Var> operands, BackwardFn rule);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a single-element loss, seeded with 1.
  Gradients backward(const Var& loss) const;

  /// Multiplies every gradient produced by rules of `kind`. Diagnostic hook
  /// used to verify that the gradient checker detects a broken rule.
  void set_backward_scale(OpKind kind, double factor);

private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> operands;
    BackwardFn rule;
  };

  // deque: appending keeps references returned by value() valid.
  std::deque<Node> nodes_;
  std::array<double, static_cast<std::size_t>(OpKind::Count)> backward_scale_{};
  bool scaled_ = false;
};

/// Free-function spelling; checks that `loss` belongs to `tape`.
Gradients backward(const Tape& tape, const Var& loss);

// Elementwise. Binary ops require identical shapes; there is no broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var relu(const Var& a);
Var sigmoid(const Var& a);
/// Gradient passes only where lo < x < hi.
Var clamp(const Var& a, double lo, double hi);
Var log(const Var& a);

Var matmul(const Var& a, const Var& b);

/// Valid cross-correlation. input [C_in,H,W], kernels [C_out,C_in,kh,kw].
Var conv2d(const Var& input, const Var& kernels, std::size_t stride);
/// Adds bias[c] to every element of channel c of a [C,...] tensor.
Var add_channel_bias(const Var& input, const Var& bias);

Var softmax_axis(const Var& t, std::size_t axis);
Var reduce_sum(const Var& t, std::size_t axis);
/// Sum of all elements as a shape-[1] tensor.
Var sum(const Var& t);
/// Euclidean norm over the final axis; the gradient at a zero vector is zero.
Var norm_last_axis(const Var& t);
/// v = |s|^2/(1+|s|^2) * s/|s| over the final axis; zero maps to zero.
Var squash(const Var& t);

/// out.flat[j] = in.flat[source[j]]; the backward pass scatter-adds.
Var gather(const Var& t, std::vector<std::size_t> source, Shape shape);
Var reshape(const Var& t, Shape shape);

/// Prediction vectors u_hat[i,j,:] = W[i,j,:,:] * u[i,:].
/// W [N,K,D_out,D_in], u [N,D_in] -> [N,K,D_out].
Var capsule_transform(const Var& weights, const Var& u);
/// s[j,:] = sum_i c[i,j] * u_hat[i,j,:]. c [N,K], u_hat [N,K,D] -> [K,D].
Var weighted_sum(const Var& coupling, const Var& u_hat);
/// a[i,j] = <u_hat[i,j,:], v[j,:]>. u_hat [N,K,D], v [K,D] -> [N,K].
Var agreement(const Var& u_hat, const Var& v);

/// Worst relative error between the analytic gradient of `f` and central
/// differences, over every element of every parameter. Denominator is
/// max(|analytic|, |numeric|, 1e-8).
struct FiniteDiffReport {
  double max_relative_error = 0.0;
  /// Per parameter worst error, same order as the input list.
  std::vector<double> per_param;
  std::size_t worst_param = 0;
  std::size_t worst_element = 0;
};

using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

FiniteDiffReport finite_diff_check(const ScalarFunction& f, std::span<const Tensor> params,
                                   double eps,
                                   const std::function<void(Tape&)>& configure_tape = {});

} // namespace capsule

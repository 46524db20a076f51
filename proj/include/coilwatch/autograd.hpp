#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "coilwatch/tensor.hpp"

namespace coilwatch {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class PoolKind { max, average };

/// A trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string name, Tensor value);
  void zero_grad();
};

/// Running statistics kept by a batch-norm layer between batches.
struct BatchNormState {
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.9;

  Tensor running_mean;
  Tensor running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t features);
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order and replays their adjoints in
/// reverse. Gradients of a node used several times accumulate additively;
/// parameter leaves accumulate into `Parameter::grad`.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant input. With `requires_grad` its gradient is kept after backward().
  Var input(Tensor value, bool requires_grad = false);
  Var param(Parameter& p);

  /// Appends an op node. `backward` is only stored if some parent needs a
  /// gradient.
  Var record(Tensor value, std::span<const Var> parents, Backward backward);

  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  /// Seeds d(root)/d(root) = 1 for a single-element root and runs adjoints
  /// from the last recorded node back to the first.
  void backward(Var root);

  /// Gradient buffer of `v`, zero-initialized on first use.
  Tensor& grad_of(Var v);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-order ids of the nodes whose adjoints ran in the last backward().
  const std::vector<std::size_t>& last_replay_order() const noexcept { return replay_order_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<std::size_t> replay_order_;
};

// Differentiable ops. Shape mismatches throw DimensionError naming the shapes.

/// a[m×k] · b[k×n].
Var matmul(Var a, Var b);
/// Adds bias[C] along axis 1 of x (x is [N×C] or [N×C×H×W]).
Var add_bias(Var x, Var bias);
/// 3×3 cross-correlation. x is [C×H×W] or [N×C×H×W]; kernels [Co×Ci×3×3].
Var conv2d(Var x, Var kernels, Padding padding);
/// 2×2 window, stride 2; odd trailing rows/columns are dropped.
Var pool2d(Var x, PoolKind kind);
Var relu(Var x);
/// Softmax over the last axis of a rank-1 or rank-2 tensor.
Var softmax(Var x);
/// Flattens every axis after the first: [N×...] -> [N×rest].
Var flatten(Var x);
/// x is [N×F]. Train mode needs N >= 2 and updates `state`.
Var batchnorm(Var x, Var scale, Var shift, BatchNormState& state, Mode mode);
/// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in infer mode.
Var dropout(Var x, double rate, Mode mode, std::mt19937_64& rng);
/// Mean of -log(max(p_true, 1e-12)) over the batch.
Var cross_entropy(Var probs, std::span<const int> labels);
/// softmax followed by cross_entropy, fused for a stable gradient (p - onehot)/N.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
Var sum(Var x);

// Plain (untaped) kernels shared with the ops above.
namespace kernels {
void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
          double* c, bool accumulate = false);
Tensor softmax_rows(const Tensor& x);
}  // namespace kernels

}  // namespace coilwatch

#pragma once

#include <span>
#include <vector>

#include "coilwatch/autograd.hpp"

namespace coilwatch {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Applies one update to `params` from their accumulated `grad`. Adam keeps
/// first/second moment buffers per parameter, matched by position, so the
/// same parameter list must be passed on every step.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(std::span<Parameter* const> params);
  const OptimizerConfig& config() const noexcept { return config_; }
  long steps_taken() const noexcept { return steps_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  long steps_ = 0;
};

}  // namespace coilwatch

#include "coilwatch/optim.hpp"

#include <cmath>

#include "coilwatch/error.hpp"

namespace coilwatch {

void Optimizer::step(std::span<Parameter* const> params) {
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("optimizer: gradient " + to_string(p->grad.shape()) + " does not match parameter '" +
                           p->name + "' " + to_string(p->value.shape()));
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (Parameter* p : params)
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    return;
  }

  if (first_moment_.empty()) {
    for (const Parameter* p : params) {
      first_moment_.emplace_back(p->value.shape(), 0.0);
      second_moment_.emplace_back(p->value.shape(), 0.0);
    }
  }
  if (first_moment_.size() != params.size()) {
    throw DimensionError("optimizer: parameter list changed size between steps");
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = first_moment_[k];
    Tensor& v = second_moment_[k];
    if (m.shape() != p.value.shape()) {
      throw DimensionError("optimizer: moment state " + to_string(m.shape()) + " does not match parameter '" +
                           p.name + "' " + to_string(p.value.shape()));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

}  // namespace coilwatch

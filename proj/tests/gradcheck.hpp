#pragma once

// Central finite-difference gradient checking shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "coilwatch/autograd.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch::testing {

using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// Shuffled, evenly spaced values in (-1, 1) that avoid 0 and never tie, so
// relu and max-pool stay away from their kinks under a finite step.
inline Tensor distinct_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double n = static_cast<double>(t.size());
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + (2.0 * static_cast<double>(i) + 1.0) / n;
  shuffle(v, rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

// Scalar sum(w * x) as a taped node, so every output element gets a distinct
// upstream gradient.
inline Var weighted_sum(Var x, const Tensor& w) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += w[i] * x.value()[i];
  const Var parents[] = {x};
  return x.tape()->record(Tensor({1}, {total}), parents, [x, w](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_of(x);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
  });
}

struct GradCheck {
  double worst_error = 0.0;  // max |analytic - numeric| / (max(|analytic|, |numeric|) + floor)
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of weighted_sum(graph(inputs), w) with
// central differences of step `h`.
inline GradCheck check_gradients(const Graph& graph, const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                                 double h = 1e-5, double floor = 1e-6) {
  Tensor weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.input(x, true));
    Var out = graph(tape, vars);
    if (weights.empty()) weights = random_tensor(out.shape(), rng, 0.5, 1.5);
    Var loss = weighted_sum(out, weights);
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return loss.value()[0];
  };
  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);
  GradCheck result;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      probe[i][j] = inputs[i][j] + h;
      const double up = evaluate(probe, nullptr);
      probe[i][j] = inputs[i][j] - h;
      const double down = evaluate(probe, nullptr);
      probe[i][j] = inputs[i][j];
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i].empty() ? 0.0 : analytic[i][j];
      const double err = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + floor);
      result.worst_error = std::max(result.worst_error, err);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace coilwatch::testing

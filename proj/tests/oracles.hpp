#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "coilwatch/data.hpp"
#include "coilwatch/forest.hpp"
#include "coilwatch/metrics.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch::testing {

// ---------------------------------------------------------------------------
// Exhaustive CART: tries every (feature, candidate threshold) pair by
// partitioning the rows directly and keeps the lowest weighted Gini.
// Impurities are compared as exact fractions.

class OracleTree {
 public:
  OracleTree(const TreeData& data, std::size_t max_depth, std::size_t min_leaf)
      : data_(data), max_depth_(max_depth), min_leaf_(min_leaf) {}

  std::vector<TreeNode> fit() {
    std::vector<std::size_t> all(data_.rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    grow(all, 0);
    return nodes_;
  }

 private:
  // Weighted impurity n_l*G_l + n_r*G_r = n - (a_l^2+b_l^2)/n_l - (a_r^2+b_r^2)/n_r
  // as num/den with den = n_l*n_r.
  struct Fraction {
    long long num, den;
  };

  static Fraction weighted_impurity(long long ln, long long lb, long long rn, long long rb) {
    const long long nl = ln + lb, nr = rn + rb;
    const long long n = nl + nr;
    return {n * nl * nr - (ln * ln + lb * lb) * nr - (rn * rn + rb * rb) * nl, nl * nr};
  }

  std::size_t grow(const std::vector<std::size_t>& rows, std::size_t depth) {
    const std::size_t id = nodes_.size();
    nodes_.emplace_back();
    long long normal = 0, broken = 0;
    for (std::size_t r : rows) (data_.labels[r] == Label::broken ? broken : normal) += 1;
    nodes_[id].normal_count = static_cast<std::size_t>(normal);
    nodes_[id].broken_count = static_cast<std::size_t>(broken);
    if (normal == 0 || broken == 0) return id;
    if (max_depth_ != 0 && depth >= max_depth_) return id;

    bool found = false;
    Fraction best{0, 1};
    std::size_t best_f = 0;
    double best_t = 0.0;
    for (std::size_t f = 0; f < data_.width; ++f) {
      std::set<double> values;
      for (std::size_t r : rows) values.insert(data_.at(r, f));
      std::vector<double> sorted(values.begin(), values.end());
      for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
        double t = sorted[k] + (sorted[k + 1] - sorted[k]) / 2.0;
        if (!(t < sorted[k + 1])) t = sorted[k];
        long long ln = 0, lb = 0, rn = 0, rb = 0;
        for (std::size_t r : rows) {
          const bool left = data_.at(r, f) <= t;
          const bool b = data_.labels[r] == Label::broken;
          (left ? (b ? lb : ln) : (b ? rb : rn)) += 1;
        }
        if (static_cast<std::size_t>(ln + lb) < min_leaf_ || static_cast<std::size_t>(rn + rb) < min_leaf_) continue;
        const Fraction w = weighted_impurity(ln, lb, rn, rb);
        if (!found || w.num * best.den < best.num * w.den) {
          found = true;
          best = w;
          best_f = f;
          best_t = t;
        }
      }
    }
    if (!found) return id;
    std::vector<std::size_t> left, right;
    for (std::size_t r : rows) (data_.at(r, best_f) <= best_t ? left : right).push_back(r);
    nodes_[id].feature = best_f;
    nodes_[id].threshold = best_t;
    const std::size_t l = grow(left, depth + 1);
    nodes_[id].left = l;
    const std::size_t rr = grow(right, depth + 1);
    nodes_[id].right = rr;
    return id;
  }

  const TreeData& data_;
  std::size_t max_depth_;
  std::size_t min_leaf_;
  std::vector<TreeNode> nodes_;
};

/// Small random dataset with deliberately repeated feature values.
inline TreeData random_tree_data(std::mt19937_64& rng, std::size_t max_rows = 8) {
  TreeData d;
  const std::size_t rows = 1 + uniform_index(rng, max_rows);
  d.width = 1 + uniform_index(rng, 3);
  for (std::size_t i = 0; i < rows * d.width; ++i) d.features.push_back(static_cast<double>(uniform_index(rng, 5)) * 0.5);
  for (std::size_t i = 0; i < rows; ++i) d.labels.push_back(uniform_index(rng, 2) ? Label::broken : Label::normal);
  return d;
}

// ---------------------------------------------------------------------------
// Metrics straight from the definitions.

struct HandMetrics {
  double accuracy, precision, recall, f_score;
};

inline HandMetrics hand_metrics(std::size_t tn, std::size_t fp, std::size_t fn, std::size_t tp) {
  HandMetrics h{};
  const double n = static_cast<double>(tn + fp + fn + tp);
  h.accuracy = n == 0 ? 0.0 : static_cast<double>(tp + tn) / n;
  h.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  h.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  h.f_score = h.precision + h.recall == 0 ? 0.0 : 2.0 * h.precision * h.recall / (h.precision + h.recall);
  return h;
}

// ---------------------------------------------------------------------------
// Matrices

/// Random SPD matrix A·Aᵀ + 0.1·I with A ~ N(0,1).
inline SquareMatrix random_spd(std::size_t n, std::mt19937_64& rng) {
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
  const Eigen::MatrixXd m = a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = i <= j ? m(i, j) : m(j, i);
  return SquareMatrix(n, std::move(v));
}

inline Eigen::VectorXd oracle_eigenvalues(const SquareMatrix& m) {
  const auto n = static_cast<Eigen::Index>(m.order());
  Eigen::MatrixXd e(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) e(i, j) = m(i, j);
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e, Eigen::EigenvaluesOnly).eigenvalues();
}

/// First invariant of an augmented copy that fails, or empty if all hold.
inline std::string augmentation_violation(const SquareMatrix& in, const SquareMatrix& out,
                                          const std::vector<std::size_t>& perm) {
  const std::size_t n = in.order();
  if (out.order() != n || perm.size() != n) return "order";
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) return "not a permutation";
    seen[p] = true;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (out(perm[i], perm[j]) != in(i, j)) return "entry mapping";
      if (out(i, j) != out(j, i)) return "symmetry";
    }
  double tr_in = 0, tr_out = 0, fro_in = 0, fro_out = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tr_in += in(i, i);
    tr_out += out(i, i);
  }
  for (double v : in.values()) fro_in += v * v;
  for (double v : out.values()) fro_out += v * v;
  if (std::abs(tr_in - tr_out) > 1e-12 * std::abs(tr_in)) return "trace";
  if (std::abs(fro_in - fro_out) > 1e-12 * fro_in) return "frobenius";
  const Eigen::VectorXd a = oracle_eigenvalues(in), b = oracle_eigenvalues(out);
  const double scale = a.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (std::abs(a(i) - b(i)) > 1e-9 * scale) return "eigenvalues";
  if (b.minCoeff() < -1e-9 * scale) return "psd";
  return {};
}

}  // namespace coilwatch::testing

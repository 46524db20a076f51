#include "coilwatch/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

Normalizer::Normalizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), stddev_(std::move(stddev)) {
  if (mean_.size() != stddev_.size()) throw DimensionError("normalizer: mean and std widths differ");
  for (double s : stddev_)
    if (!(s > 0.0)) throw DegenerateFeatureError("normalizer: standard deviation must be positive");
}

Normalizer Normalizer::fit(std::span<const double> rows, std::size_t width,
                           std::span<const std::string_view> column_names) {
  if (width == 0 || rows.size() % width != 0) {
    throw DimensionError("normalizer: " + std::to_string(rows.size()) + " values do not form rows of width " +
                         std::to_string(width));
  }
  const std::size_t n = rows.size() / width;
  if (n < 2) throw ContractViolation("normalizer: need at least 2 rows to fit, got " + std::to_string(n));
  std::vector<double> mean(width, 0.0), stddev(width, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < width; ++c) mean[c] += rows[r * width + c];
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double d = rows[r * width + c] - mean[c];
      stddev[c] += d * d;
    }
  for (std::size_t c = 0; c < width; ++c) {
    stddev[c] = std::sqrt(stddev[c] / static_cast<double>(n));
    if (!(stddev[c] > 0.0)) {
      const std::string name = c < column_names.size() ? std::string(column_names[c]) : "column " + std::to_string(c);
      throw DegenerateFeatureError("normalizer: feature '" + name + "' is constant and cannot be scaled");
    }
  }
  return Normalizer(std::move(mean), std::move(stddev));
}

void Normalizer::transform(std::span<double> rows) const {
  const std::size_t w = width();
  if (w == 0) throw ContractViolation("normalizer is not fitted");
  if (rows.size() % w != 0) throw DimensionError("normalizer: data does not form rows of width " + std::to_string(w));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = (rows[i] - mean_[i % w]) / stddev_[i % w];
}

void Normalizer::inverse_transform(std::span<double> rows) const {
  const std::size_t w = width();
  if (w == 0) throw ContractViolation("normalizer is not fitted");
  if (rows.size() % w != 0) throw DimensionError("normalizer: data does not form rows of width " + std::to_string(w));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = rows[i] * stddev_[i % w] + mean_[i % w];
}

// ---------------------------------------------------------------------------
// Augmentation

SquareMatrix permute_symmetric(const SquareMatrix& m, std::span<const std::size_t> permutation) {
  const std::size_t n = m.order();
  if (permutation.size() != n) throw DimensionError("permutation length does not match matrix order");
  SquareMatrix out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(permutation[i], permutation[j]) = m(i, j);
  return out;
}

namespace {

// n! - 1, saturating.
std::size_t non_identity_permutations(std::size_t n) {
  std::size_t total = 1;
  for (std::size_t k = 2; k <= n; ++k) {
    if (total > std::numeric_limits<std::size_t>::max() / k) return std::numeric_limits<std::size_t>::max();
    total *= k;
  }
  return total - 1;
}

std::vector<std::size_t> draw_permutation(std::size_t n, std::mt19937_64& rng,
                                          const std::set<std::vector<std::size_t>>& used) {
  std::vector<std::size_t> p(n);
  while (true) {
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p, rng);
    bool identity = true;
    for (std::size_t i = 0; identity && i < n; ++i) identity = p[i] == i;
    if (!identity && !used.contains(p)) return p;
  }
}

void check_symmetric(const SquareMatrix& m) {
  const double scale = m.max_abs();
  for (std::size_t i = 0; i < m.order(); ++i)
    for (std::size_t j = i + 1; j < m.order(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > NcmTolerance::kSymmetry * scale) {
        throw ContractViolation("augment_ncm: input matrix is not symmetric");
      }
}

}  // namespace

std::vector<PermutedMatrix> augment_ncm(const SquareMatrix& m, std::size_t count, std::mt19937_64& rng) {
  const std::size_t n = m.order();
  if (n == 0) throw ContractViolation("augment_ncm: empty matrix");
  check_symmetric(m);
  const std::size_t available = non_identity_permutations(n);
  if (count > available) {
    throw ContractViolation("augment_ncm: requested " + std::to_string(count) + " distinct permutations but a " +
                            std::to_string(n) + "x" + std::to_string(n) + " matrix has only " +
                            std::to_string(available) + " non-identity ones");
  }
  std::set<std::vector<std::size_t>> used;
  std::vector<PermutedMatrix> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto p = draw_permutation(n, rng, used);
    used.insert(p);
    SquareMatrix permuted = permute_symmetric(m, p);
    out.push_back(PermutedMatrix{std::move(p), std::move(permuted)});
  }
  return out;
}

std::vector<PermutedMatrix> augment_ncm(const SquareMatrix& m, std::mt19937_64& rng) {
  return augment_ncm(m, m.order() == 0 ? 0 : m.order() - 1, rng);
}

std::size_t augmentations_needed(std::size_t broken, std::size_t total, double target_ratio) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
    throw ContractViolation("target ratio must lie strictly between 0 and 1");
  }
  if (broken > total) throw ContractViolation("broken count exceeds total");
  auto reached = [&](std::size_t k) {
    return static_cast<double>(broken + k) / static_cast<double>(total + k) >= target_ratio;
  };
  if (total > 0 && reached(0)) return 0;
  // Closed-form estimate, then settle on the exact minimum.
  const double estimate = (target_ratio * static_cast<double>(total) - static_cast<double>(broken)) / (1.0 - target_ratio);
  std::size_t k = estimate > 1.0 ? static_cast<std::size_t>(std::floor(estimate)) - 1 : 0;
  while (k > 0 && reached(k - 1)) --k;
  while (!reached(k)) ++k;
  return k;
}

std::vector<NcmSample> balance_to_ratio(std::span<const NcmSample> samples, double target_ratio,
                                        std::mt19937_64& rng, BalanceOptions options) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) {
    throw ContractViolation("balance_to_ratio: target ratio must lie strictly between 0 and 1");
  }
  std::vector<std::size_t> broken;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].label == Label::broken) broken.push_back(i);
  if (broken.empty()) throw ContractViolation("balance_to_ratio: no broken samples to augment");

  std::vector<NcmSample> out(samples.begin(), samples.end());
  const std::size_t needed = augmentations_needed(broken.size(), samples.size(), target_ratio);
  if (needed == 0) return out;

  std::vector<std::set<std::vector<std::size_t>>> used(broken.size());
  auto make = [&](std::size_t which, std::vector<std::size_t> perm) {
    const NcmSample& src = samples[broken[which]];
    NcmSample copy;
    copy.coil_id = src.coil_id;
    copy.matrix = permute_symmetric(src.matrix, perm);
    copy.label = Label::broken;
    copy.provenance = Provenance::augmented;
    copy.measurement = src.measurement;
    used[which].insert(std::move(perm));
    return copy;
  };
  auto fresh = [&](std::size_t which) {
    const std::size_t n = samples[broken[which]].matrix.order();
    if (used[which].size() >= non_identity_permutations(n)) {
      throw ContractViolation("balance_to_ratio: ran out of distinct permutations for a broken sample");
    }
    return draw_permutation(n, rng, used[which]);
  };

  out.reserve(samples.size() + needed);
  if (options.full_expansion) {
    struct Candidate {
      std::size_t which;
      std::vector<std::size_t> perm;
    };
    std::vector<Candidate> pool;
    for (std::size_t w = 0; w < broken.size(); ++w) {
      for (auto& pm : augment_ncm(samples[broken[w]].matrix, rng)) pool.push_back({w, std::move(pm.permutation)});
    }
    shuffle(pool, rng);
    const std::size_t take = std::min(needed, pool.size());
    // Keep the selection but restore a stable order: by original, then draw order.
    std::vector<std::size_t> chosen(take);
    for (std::size_t i = 0; i < take; ++i) chosen[i] = i;
    std::stable_sort(chosen.begin(), chosen.end(),
                     [&](std::size_t a, std::size_t b) { return pool[a].which < pool[b].which; });
    for (std::size_t i : chosen) out.push_back(make(pool[i].which, std::move(pool[i].perm)));
    for (std::size_t k = take; k < needed; ++k) {
      const std::size_t w = k % broken.size();
      out.push_back(make(w, fresh(w)));
    }
    return out;
  }
  for (std::size_t k = 0; k < needed; ++k) {
    const std::size_t w = k % broken.size();
    out.push_back(make(w, fresh(w)));
  }
  return out;
}

}  // namespace coilwatch

#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "coilwatch/data.hpp"

namespace coilwatch {

/// Per-feature standardization: (x - mean) / std with population std.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(std::vector<double> mean, std::vector<double> stddev);

  /// `rows` is row-major with `width` columns. Needs at least 2 rows; throws
  /// DegenerateFeatureError naming the first constant column.
  static Normalizer fit(std::span<const double> rows, std::size_t width,
                        std::span<const std::string_view> column_names = {});

  std::size_t width() const noexcept { return mean_.size(); }
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& stddev() const noexcept { return stddev_; }

  /// In place on row-major data of `width()` columns. A width-1 normalizer
  /// applies its single statistic to every element.
  void transform(std::span<double> rows) const;
  void inverse_transform(std::span<double> rows) const;

  friend bool operator==(const Normalizer&, const Normalizer&) = default;

 private:
  std::vector<double> mean_;
  std::vector<double> stddev_;
};

/// A matrix reordered by a channel permutation: result(p[i], p[j]) = source(i, j).
struct PermutedMatrix {
  std::vector<std::size_t> permutation;
  SquareMatrix matrix;
};

/// Applies the symmetric permutation P·M·Pᵀ.
SquareMatrix permute_symmetric(const SquareMatrix& m, std::span<const std::size_t> permutation);

/// Draws `count` distinct non-identity channel permutations and returns the
/// permuted copies. `count` defaults to N-1 for an NxN input.
std::vector<PermutedMatrix> augment_ncm(const SquareMatrix& m, std::size_t count, std::mt19937_64& rng);
std::vector<PermutedMatrix> augment_ncm(const SquareMatrix& m, std::mt19937_64& rng);

struct BalanceOptions {
  /// Expand every broken original N-1 times, then subsample to the needed
  /// count, instead of generating on demand.
  bool full_expansion = false;
};

/// Smallest k with (broken + k) / (total + k) >= target_ratio.
std::size_t augmentations_needed(std::size_t broken, std::size_t total, double target_ratio);

/// Appends augmented copies of the broken matrices (round-robin over the
/// originals in input order) until the broken share reaches `target_ratio`.
/// Originals are returned first and untouched.
std::vector<NcmSample> balance_to_ratio(std::span<const NcmSample> samples, double target_ratio,
                                        std::mt19937_64& rng, BalanceOptions options = {});

}  // namespace coilwatch

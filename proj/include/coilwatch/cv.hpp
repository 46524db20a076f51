#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coilwatch/label.hpp"

namespace coilwatch {

/// One leave-coils-out fold. The fit coils (everything outside `test`) are
/// split into `base_train` (model fitting) and `tune` (model selection).
struct Fold {
  std::vector<std::string> test;
  std::vector<std::string> base_train;
  std::vector<std::string> tune;
};

struct FoldPlan {
  std::size_t k = 0;
  /// Index of the fold in which each coil is a test coil.
  std::map<std::string, std::size_t> test_fold_of;
  std::vector<Fold> folds;

  /// Throws ContractViolation unless every coil is a test coil exactly once
  /// and each fold's base_train, tune, and test sets are pairwise disjoint
  /// and together cover every coil.
  void validate() const;
};

/// Shuffles the coils (seeded) and deals them into k folds, broken coils
/// first, so fold sizes and broken counts each differ by at most one. Each
/// fold's fit coils are then split `base_fraction` / rest, stratified by label.
FoldPlan group_kfold(std::span<const std::pair<std::string, Label>> coils, std::size_t k, std::uint64_t seed,
                     double base_fraction = 0.7);

}  // namespace coilwatch

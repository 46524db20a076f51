#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "coilwatch/data.hpp"
#include "coilwatch/forest.hpp"
#include "coilwatch/network.hpp"

namespace coilwatch {

struct CvSettings {
  std::size_t folds = 10;
  double base_fraction = 0.7;
};

struct FcnSettings {
  std::array<std::size_t, 4> hidden{64, 64, 32, 16};
  double dropout = 0.2;
  TrainConfig train;
};

struct CnnSettings {
  /// Variants evaluated as standalone stages.
  std::vector<CnnVariant> variants{CnnVariant::cnn2};
  /// Variant whose probabilities feed the meta learner.
  CnnVariant stacked = CnnVariant::cnn2;
  double cnn3_dropout = 0.3;
  TrainConfig train;
};

struct AugmentSettings {
  bool enabled = true;
  double target_ratio = 0.2;
  bool full_expansion = false;
  /// Also train every CNN variant without augmentation (stage "<variant>_no_aug").
  bool ablation = false;
};

struct MetaSettings {
  ForestParams forest;
  /// Fit the meta learner on rows pooled over all folds instead of per fold.
  bool pooled = false;
  /// Also report a single decision tree as meta learner (stage "stacked_tree").
  bool decision_tree = true;
};

/// Everything that determines an evaluation run.
struct RunConfig {
  /// When both are set the dataset is read from these files; otherwise it is
  /// generated from `synthetic`.
  std::optional<std::filesystem::path> channel_table;
  std::optional<std::filesystem::path> ncm_table;
  SyntheticSpec synthetic;

  CvSettings cv;
  FcnSettings fcn;
  CnnSettings cnn;
  AugmentSettings augment;
  MetaSettings meta;

  /// Master seed; per-fold and per-model seeds are derived from it.
  std::uint64_t seed = 1;
  std::size_t jobs = 1;

  bool synthetic_data() const { return !channel_table || !ncm_table; }
  /// Throws ContractViolation naming the offending setting.
  void validate() const;
};

/// JSON text with every field spelled out (defaults included).
std::string config_to_json(const RunConfig& config);
/// Overlays the keys present in `text` on top of `base`. Unknown keys and
/// ill-typed values raise ContractViolation naming the key path.
RunConfig config_from_json(const std::string& text, const RunConfig& base = {});
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = {});

/// Stable 64-bit FNV-1a hash of config_to_json, as 16 hex digits.
std::string config_fingerprint(const RunConfig& config);

}  // namespace coilwatch

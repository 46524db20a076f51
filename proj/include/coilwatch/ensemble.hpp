#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coilwatch/data.hpp"
#include "coilwatch/forest.hpp"
#include "coilwatch/metrics.hpp"
#include "coilwatch/network.hpp"

namespace coilwatch {

struct ProbabilitySummary {
  double min = 0.0;
  double stddev = 0.0;  // population
  double mean = 0.0;
};

/// min / population std / mean of any non-empty set of probabilities.
ProbabilitySummary summarize_probabilities(std::span<const double> probs);
/// Same statistic for exactly one coil's 20 channel probabilities.
ProbabilitySummary aggregate_coil(std::span<const double> channel_probs);

inline constexpr std::array<std::string_view, 4> kMetaFeatureNames = {"fcn_min", "fcn_std", "fcn_mean", "cnn_prob"};

/// Stacking input for one coil. The fcn_* fields summarize the FCN's
/// per-channel probability of class normal, so fcn_min is the least healthy
/// channel; cnn_prob is the CNN's probability of class broken.
struct MetaFeatureRow {
  std::string coil_id;
  double fcn_min = 0.0;
  double fcn_std = 0.0;
  double fcn_mean = 0.0;
  double cnn_prob = 0.0;
  Label label = Label::normal;

  std::array<double, 4> features() const { return {fcn_min, fcn_std, fcn_mean, cnn_prob}; }
  friend bool operator==(const MetaFeatureRow&, const MetaFeatureRow&) = default;
};

/// Averages the per-measurement channel summaries and CNN probabilities of
/// one coil into a meta row.
MetaFeatureRow make_meta_row(std::string coil_id, std::span<const ProbabilitySummary> events,
                             std::span<const double> cnn_probs, Label label);

struct MetaFeatureSet {
  std::vector<MetaFeatureRow> rows;
  /// Coils requested but lacking channel rows or matrices.
  std::size_t skipped = 0;
};

/// Meta rows from precomputed base predictions. `channel_p_broken` is indexed
/// like `data.channels`, `ncm_p_broken` like `data.ncms`; only rows of the
/// requested coils are read.
MetaFeatureSet assemble_meta_features(const Dataset& data, std::span<const std::string> coils,
                                      std::span<const double> channel_p_broken,
                                      std::span<const double> ncm_p_broken);

/// Runs both base models over the requested coils and assembles meta rows.
/// Throws ContractViolation when a model was trained for a different fold or
/// on any of the requested coils.
MetaFeatureSet build_meta_features(const TrainedModel& fcn, const TrainedModel& cnn, const Dataset& data,
                                   std::span<const std::string> coils, std::optional<std::size_t> fold);

std::vector<double> meta_row_matrix(std::span<const MetaFeatureRow> rows);
TreeData meta_tree_data(std::span<const MetaFeatureRow> rows, std::span<const std::size_t> select = {});

struct MetaSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> held_out;
};

/// Stratified 50/50 split of the rows (one per coil): ceil(broken/2) broken
/// and floor(total/2) rows overall go to the fit half.
MetaSplit stratified_half_split(std::span<const MetaFeatureRow> rows, std::uint64_t seed);

struct StackedModel {
  Forest forest;
  MetaSplit split;
  std::vector<ForestPrediction> held_out_predictions;
  Metrics held_out_metrics;
};

/// Fits the meta forest on one stratified half and scores the other half.
/// Needs at least 2 rows of each class.
StackedModel stacked_fit(std::span<const MetaFeatureRow> rows, const ForestParams& params, std::uint64_t split_seed);
/// Same with an explicit partition.
StackedModel stacked_fit(std::span<const MetaFeatureRow> rows, const MetaSplit& split, const ForestParams& params);

/// Both halves in turn: fit on one, predict the other. Every row receives
/// exactly one out-of-half prediction (in row order).
std::vector<ForestPrediction> stacked_cross_fit(std::span<const MetaFeatureRow> rows, const ForestParams& params,
                                                std::uint64_t split_seed);

}  // namespace coilwatch

#pragma once

#include <cstddef>
#include <span>

#include "coilwatch/label.hpp"

namespace coilwatch {

struct ConfusionCounts {
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;

  std::size_t total() const noexcept { return tn + fp + fn + tp; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tn += o.tn, fp += o.fp, fn += o.fn, tp += o.tp;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Binary classification scores with broken as the positive class.
///
/// Ratios are in [0, 1]. The confusion rates are row-normalized percentages
/// in the layout of a confusion table: tn_rate + fp_rate = 100 over the
/// actual negatives and fn_rate + tp_rate = 100 over the actual positives
/// (both 0 when that class is absent). negative_share / positive_share give
/// the class mix in percent.
struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
  ConfusionCounts counts;
  double tn_rate = 0.0, fp_rate = 0.0, fn_rate = 0.0, tp_rate = 0.0;
  double negative_share = 0.0, positive_share = 0.0;
};

/// Harmonic mean, 0 when both inputs are 0.
double harmonic_f(double precision, double recall);

Metrics metrics_from_counts(const ConfusionCounts& counts);
/// Throws ContractViolation on length mismatch or empty input.
Metrics compute_metrics(std::span<const Label> predicted, std::span<const Label> actual);

/// Field-wise arithmetic mean over folds; `counts` holds the summed counts.
/// F is averaged as a score, so the result need not equal harmonic_f of the
/// averaged precision and recall.
Metrics average_metrics(std::span<const Metrics> folds);
/// Metrics of the summed confusion counts.
Metrics pooled_metrics(std::span<const Metrics> folds);

}  // namespace coilwatch

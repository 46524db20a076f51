#include "coilwatch/metrics.hpp"

#include "coilwatch/error.hpp"

namespace coilwatch {

double harmonic_f(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Metrics metrics_from_counts(const ConfusionCounts& c) {
  Metrics m;
  m.counts = c;
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f_score = harmonic_f(m.precision, m.recall);
  m.tn_rate = 100.0 * ratio(c.tn, c.tn + c.fp);
  m.fp_rate = c.tn + c.fp == 0 ? 0.0 : 100.0 - m.tn_rate;
  m.tp_rate = 100.0 * ratio(c.tp, c.tp + c.fn);
  m.fn_rate = c.tp + c.fn == 0 ? 0.0 : 100.0 - m.tp_rate;
  m.negative_share = 100.0 * ratio(c.tn + c.fp, c.total());
  m.positive_share = c.total() == 0 ? 0.0 : 100.0 - m.negative_share;
  return m;
}

Metrics compute_metrics(std::span<const Label> predicted, std::span<const Label> actual) {
  if (predicted.size() != actual.size()) {
    throw ContractViolation("compute_metrics: " + std::to_string(predicted.size()) + " predictions for " +
                            std::to_string(actual.size()) + " labels");
  }
  if (predicted.empty()) throw ContractViolation("compute_metrics: no predictions");
  ConfusionCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool pred = predicted[i] == Label::broken;
    const bool truth = actual[i] == Label::broken;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return metrics_from_counts(c);
}

Metrics average_metrics(std::span<const Metrics> folds) {
  Metrics avg;
  if (folds.empty()) return avg;
  for (const Metrics& m : folds) {
    avg.accuracy += m.accuracy;
    avg.precision += m.precision;
    avg.recall += m.recall;
    avg.f_score += m.f_score;
    avg.tn_rate += m.tn_rate;
    avg.fp_rate += m.fp_rate;
    avg.fn_rate += m.fn_rate;
    avg.tp_rate += m.tp_rate;
    avg.negative_share += m.negative_share;
    avg.positive_share += m.positive_share;
    avg.counts += m.counts;
  }
  const double n = static_cast<double>(folds.size());
  avg.accuracy /= n;
  avg.precision /= n;
  avg.recall /= n;
  avg.f_score /= n;
  avg.tn_rate /= n;
  avg.fp_rate /= n;
  avg.fn_rate /= n;
  avg.tp_rate /= n;
  avg.negative_share /= n;
  avg.positive_share /= n;
  return avg;
}

Metrics pooled_metrics(std::span<const Metrics> folds) {
  ConfusionCounts total;
  for (const Metrics& m : folds) total += m.counts;
  return metrics_from_counts(total);
}

}  // namespace coilwatch

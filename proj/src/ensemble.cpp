#include "coilwatch/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

ProbabilitySummary summarize_probabilities(std::span<const double> probs) {
  if (probs.empty()) throw ContractViolation("summarize_probabilities: no values");
  ProbabilitySummary s;
  s.min = probs[0];
  double total = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p)) throw ContractViolation("summarize_probabilities: non-finite probability");
    s.min = std::min(s.min, p);
    total += p;
  }
  s.mean = total / static_cast<double>(probs.size());
  double sq = 0.0;
  for (double p : probs) sq += (p - s.mean) * (p - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(probs.size()));
  // Rounding in the mean must not break min <= mean.
  s.mean = std::max(s.mean, s.min);
  return s;
}

ProbabilitySummary aggregate_coil(std::span<const double> channel_probs) {
  if (channel_probs.size() != kChannelsPerCoil) {
    throw ContractViolation("aggregate_coil: expected " + std::to_string(kChannelsPerCoil) +
                            " channel probabilities, got " + std::to_string(channel_probs.size()));
  }
  return summarize_probabilities(channel_probs);
}

MetaFeatureRow make_meta_row(std::string coil_id, std::span<const ProbabilitySummary> events,
                             std::span<const double> cnn_probs, Label label) {
  if (events.empty() || cnn_probs.empty()) throw ContractViolation("make_meta_row: coil needs both data levels");
  MetaFeatureRow row;
  row.coil_id = std::move(coil_id);
  row.label = label;
  for (const auto& e : events) {
    row.fcn_min += e.min;
    row.fcn_std += e.stddev;
    row.fcn_mean += e.mean;
  }
  const double n = static_cast<double>(events.size());
  row.fcn_min /= n;
  row.fcn_std /= n;
  row.fcn_mean /= n;
  row.fcn_mean = std::max(row.fcn_mean, row.fcn_min);
  for (double p : cnn_probs) row.cnn_prob += p;
  row.cnn_prob /= static_cast<double>(cnn_probs.size());
  return row;
}

MetaFeatureSet assemble_meta_features(const Dataset& data, std::span<const std::string> coils,
                                      std::span<const double> channel_p_broken,
                                      std::span<const double> ncm_p_broken) {
  if (channel_p_broken.size() != data.channels.size() || ncm_p_broken.size() != data.ncms.size()) {
    throw DimensionError("assemble_meta_features: prediction vectors must be indexed like the dataset");
  }
  const auto groups = data.coils();
  MetaFeatureSet out;
  for (const std::string& coil : coils) {
    const auto it = groups.find(coil);
    if (it == groups.end() || it->second.channel_rows.empty() || it->second.ncm_rows.empty()) {
      ++out.skipped;
      continue;
    }
    std::map<std::size_t, std::vector<double>> by_event;
    for (std::size_t r : it->second.channel_rows)
      by_event[data.channels[r].measurement].push_back(1.0 - channel_p_broken[r]);
    std::vector<ProbabilitySummary> events;
    for (const auto& [event, probs] : by_event) events.push_back(aggregate_coil(probs));
    std::vector<double> cnn;
    for (std::size_t r : it->second.ncm_rows)
      if (data.ncms[r].provenance == Provenance::measured) cnn.push_back(ncm_p_broken[r]);
    if (cnn.empty()) {
      ++out.skipped;
      continue;
    }
    out.rows.push_back(make_meta_row(coil, events, cnn, it->second.label));
  }
  return out;
}

namespace {

void check_leak(const TrainedModel& model, const char* which, std::span<const std::string> coils,
                std::optional<std::size_t> fold) {
  if (model.fold != fold) {
    throw ContractViolation(std::string("build_meta_features: ") + which + " model belongs to a different fold");
  }
  for (const auto& coil : coils) {
    if (std::binary_search(model.training_coils.begin(), model.training_coils.end(), coil)) {
      throw ContractViolation(std::string("build_meta_features: coil '") + coil + "' was used to train the " + which +
                              " model");
    }
  }
}

}  // namespace

MetaFeatureSet build_meta_features(const TrainedModel& fcn, const TrainedModel& cnn, const Dataset& data,
                                   std::span<const std::string> coils, std::optional<std::size_t> fold) {
  check_leak(fcn, "FCN", coils, fold);
  check_leak(cnn, "CNN", coils, fold);
  const auto groups = data.coils();
  std::vector<double> channel_p(data.channels.size(), 0.0), ncm_p(data.ncms.size(), 0.0);
  std::vector<std::size_t> channel_rows, ncm_rows;
  for (const auto& coil : coils) {
    const auto it = groups.find(coil);
    if (it == groups.end()) continue;
    channel_rows.insert(channel_rows.end(), it->second.channel_rows.begin(), it->second.channel_rows.end());
    ncm_rows.insert(ncm_rows.end(), it->second.ncm_rows.begin(), it->second.ncm_rows.end());
  }
  if (!channel_rows.empty()) {
    Tensor batch({channel_rows.size(), kChannelFeatureCount});
    for (std::size_t i = 0; i < channel_rows.size(); ++i)
      std::copy(data.channels[channel_rows[i]].features.begin(), data.channels[channel_rows[i]].features.end(),
                batch.raw() + i * kChannelFeatureCount);
    const auto p = predict_proba_batch(fcn, batch);
    for (std::size_t i = 0; i < channel_rows.size(); ++i) channel_p[channel_rows[i]] = p[i];
  }
  if (!ncm_rows.empty()) {
    constexpr std::size_t N = kChannelsPerCoil;
    Tensor batch({ncm_rows.size(), 1, N, N});
    for (std::size_t i = 0; i < ncm_rows.size(); ++i) {
      const auto v = data.ncms[ncm_rows[i]].matrix.values();
      std::copy(v.begin(), v.end(), batch.raw() + i * N * N);
    }
    const auto p = predict_proba_batch(cnn, batch);
    for (std::size_t i = 0; i < ncm_rows.size(); ++i) ncm_p[ncm_rows[i]] = p[i];
  }
  return assemble_meta_features(data, coils, channel_p, ncm_p);
}

std::vector<double> meta_row_matrix(std::span<const MetaFeatureRow> rows) {
  std::vector<double> out;
  out.reserve(rows.size() * 4);
  for (const auto& r : rows)
    for (double v : r.features()) out.push_back(v);
  return out;
}

TreeData meta_tree_data(std::span<const MetaFeatureRow> rows, std::span<const std::size_t> select) {
  TreeData data;
  data.width = kMetaFeatureNames.size();
  auto add = [&](const MetaFeatureRow& r) {
    for (double v : r.features()) data.features.push_back(v);
    data.labels.push_back(r.label);
  };
  if (select.empty()) {
    for (const auto& r : rows) add(r);
  } else {
    for (std::size_t i : select) add(rows[i]);
  }
  return data;
}

MetaSplit stratified_half_split(std::span<const MetaFeatureRow> rows, std::uint64_t seed) {
  std::vector<std::size_t> broken, normal;
  for (std::size_t i = 0; i < rows.size(); ++i) (rows[i].label == Label::broken ? broken : normal).push_back(i);
  std::mt19937_64 rng(seed);
  shuffle(broken, rng);
  shuffle(normal, rng);
  const std::size_t fit_total = rows.size() / 2;
  const std::size_t fit_broken = std::min((broken.size() + 1) / 2, fit_total);
  const std::size_t fit_normal = std::min(fit_total - fit_broken, normal.size());
  MetaSplit split;
  split.fit.assign(broken.begin(), broken.begin() + fit_broken);
  split.fit.insert(split.fit.end(), normal.begin(), normal.begin() + fit_normal);
  split.held_out.assign(broken.begin() + fit_broken, broken.end());
  split.held_out.insert(split.held_out.end(), normal.begin() + fit_normal, normal.end());
  std::sort(split.fit.begin(), split.fit.end());
  std::sort(split.held_out.begin(), split.held_out.end());
  return split;
}

namespace {

void check_stackable(std::span<const MetaFeatureRow> rows) {
  const auto broken = static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [](const MetaFeatureRow& r) { return r.label == Label::broken; }));
  const std::size_t normal = rows.size() - broken;
  if (broken == 0 || normal == 0) {
    throw TrainingDegeneracyError("stacked_fit: meta rows contain a single class (" + std::to_string(rows.size()) +
                                  " rows)");
  }
  if (broken < 2 || normal < 2) {
    throw ContractViolation("stacked_fit: need at least 2 rows per class, got " + std::to_string(broken) +
                            " broken and " + std::to_string(normal) + " normal");
  }
}

}  // namespace

StackedModel stacked_fit(std::span<const MetaFeatureRow> rows, const MetaSplit& split, const ForestParams& params) {
  check_stackable(rows);
  if (split.fit.empty() || split.held_out.empty()) throw ContractViolation("stacked_fit: both halves must be non-empty");
  StackedModel model;
  model.split = split;
  model.forest = fit_forest(meta_tree_data(rows, split.fit), params);
  std::vector<Label> predicted, actual;
  for (std::size_t i : split.held_out) {
    const auto f = rows[i].features();
    model.held_out_predictions.push_back(model.forest.predict(f));
    predicted.push_back(model.held_out_predictions.back().label);
    actual.push_back(rows[i].label);
  }
  model.held_out_metrics = compute_metrics(predicted, actual);
  return model;
}

StackedModel stacked_fit(std::span<const MetaFeatureRow> rows, const ForestParams& params, std::uint64_t split_seed) {
  check_stackable(rows);
  return stacked_fit(rows, stratified_half_split(rows, split_seed), params);
}

std::vector<ForestPrediction> stacked_cross_fit(std::span<const MetaFeatureRow> rows, const ForestParams& params,
                                                std::uint64_t split_seed) {
  check_stackable(rows);
  const MetaSplit first = stratified_half_split(rows, split_seed);
  const MetaSplit second{first.held_out, first.fit};
  std::vector<ForestPrediction> out(rows.size(), ForestPrediction{Label::normal, 0.0});
  for (const MetaSplit* split : {&first, &second}) {
    const StackedModel model = stacked_fit(rows, *split, params);
    for (std::size_t i = 0; i < split->held_out.size(); ++i) out[split->held_out[i]] = model.held_out_predictions[i];
  }
  return out;
}

}  // namespace coilwatch

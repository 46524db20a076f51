#include "coilwatch/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <random>
#include <thread>

#include "coilwatch/error.hpp"
#include "coilwatch/preprocessing.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

std::string cnn_stage_name(CnnVariant variant, bool ablation) {
  std::string name(to_string(variant));
  if (ablation) name += "_no_aug";
  return name;
}

std::vector<std::string> stage_names(const RunConfig& config) {
  std::vector<std::string> names{kStageFcnChannel, kStageFcnCoil};
  for (CnnVariant v : config.cnn.variants) names.push_back(cnn_stage_name(v));
  if (config.augment.enabled && config.augment.ablation)
    for (CnnVariant v : config.cnn.variants) names.push_back(cnn_stage_name(v, true));
  names.push_back(kStageStacked);
  if (config.meta.decision_tree) names.push_back(kStageStackedTree);
  return names;
}

std::size_t EvalReport::failed_folds() const {
  return static_cast<std::size_t>(std::count_if(folds.begin(), folds.end(), [](const FoldResult& f) { return !f.ok; }));
}

namespace {

using CoilIndex = std::map<std::string, CoilRecords>;

std::vector<std::size_t> channel_rows_of(const CoilIndex& index, std::span<const std::string> coils) {
  std::vector<std::size_t> rows;
  for (const auto& coil : coils) {
    const auto it = index.find(coil);
    if (it != index.end()) rows.insert(rows.end(), it->second.channel_rows.begin(), it->second.channel_rows.end());
  }
  return rows;
}

// Measured matrices only; augmented records in the input never take part.
std::vector<std::size_t> ncm_rows_of(const Dataset& data, const CoilIndex& index, std::span<const std::string> coils) {
  std::vector<std::size_t> rows;
  for (const auto& coil : coils) {
    const auto it = index.find(coil);
    if (it == index.end()) continue;
    for (std::size_t r : it->second.ncm_rows)
      if (data.ncms[r].provenance == Provenance::measured) rows.push_back(r);
  }
  return rows;
}

Tensor channel_batch(const Dataset& data, std::span<const std::size_t> rows) {
  Tensor batch({std::max<std::size_t>(rows.size(), 1), kChannelFeatureCount});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = data.channels[rows[i]].features;
    std::copy(f.begin(), f.end(), batch.raw() + i * kChannelFeatureCount);
  }
  return batch;
}

LabeledSet channel_set(const Dataset& data, std::span<const std::size_t> rows, const Normalizer& norm) {
  LabeledSet set{channel_batch(data, rows), {}};
  norm.transform(set.inputs.data());
  for (std::size_t r : rows) set.labels.push_back(data.channels[r].label);
  return set;
}

// Normalized when `norm` is given, raw otherwise.
LabeledSet matrix_set(std::span<const NcmSample> samples, const Normalizer* norm) {
  constexpr std::size_t N = kChannelsPerCoil;
  LabeledSet set{Tensor({std::max<std::size_t>(samples.size(), 1), 1, N, N}), {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto v = samples[i].matrix.values();
    if (v.size() != N * N) throw DimensionError("matrix of order " + std::to_string(samples[i].matrix.order()) +
                                                " where " + std::to_string(N) + "x" + std::to_string(N) +
                                                " is required (coil " + samples[i].coil_id + ")");
    std::copy(v.begin(), v.end(), set.inputs.raw() + i * N * N);
    set.labels.push_back(samples[i].label);
  }
  if (norm) norm->transform(set.inputs.data());
  return set;
}

NormalizerRecord record_of(const Normalizer& n, std::size_t rows) { return {n.mean(), n.stddev(), rows}; }

std::vector<std::string> sorted_union(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::string> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void say(const Logger& log, const std::string& text) {
  if (log) log(text);
}

std::string fold_tag(std::optional<std::size_t> fold) {
  return fold ? "fold " + std::to_string(*fold) + ": " : std::string();
}

std::vector<CnnVariant> trained_variants(const RunConfig& config) {
  std::vector<CnnVariant> out = config.cnn.variants;
  if (std::find(out.begin(), out.end(), config.cnn.stacked) == out.end()) out.push_back(config.cnn.stacked);
  return out;
}

}  // namespace

BaseModels train_base_models(const RunConfig& config, const Dataset& data, std::span<const std::string> base_train,
                             std::span<const std::string> tune, std::optional<std::size_t> fold,
                             std::uint64_t seed, const Logger& log) {
  const CoilIndex index = data.coils();
  const auto fitted_on = sorted_union(base_train, tune);
  BaseModels out;
  FoldDiagnostics& diag = out.diagnostics;
  diag.base_train_coils.assign(base_train.begin(), base_train.end());
  diag.tune_coils.assign(tune.begin(), tune.end());

  // Channel level.
  const auto base_rows = channel_rows_of(index, base_train);
  const auto tune_rows = channel_rows_of(index, tune);
  if (base_rows.empty() || tune_rows.empty()) throw ContractViolation("no channel rows in base-train or tune coils");
  const Tensor raw_base = channel_batch(data, base_rows);
  const Normalizer channel_norm = Normalizer::fit(raw_base.data(), kChannelFeatureCount, kChannelFeatureNames);
  diag.channel_normalizer = record_of(channel_norm, base_rows.size());

  TrainConfig fcn_cfg = config.fcn.train;
  fcn_cfg.seed = mix_seed(seed, 1);
  say(log, fold_tag(fold) + "training fcn on " + std::to_string(base_rows.size()) + " channel rows");
  out.fcn = train(build_fcn(config.fcn.hidden, config.fcn.dropout), channel_set(data, base_rows, channel_norm),
                  channel_set(data, tune_rows, channel_norm), fcn_cfg);
  out.fcn.normalizer = channel_norm;
  out.fcn.fold = fold;
  out.fcn.training_coils = fitted_on;
  diag.selected_epochs["fcn"] = out.fcn.selected_epoch;

  // Matrix level.
  std::vector<NcmSample> base_ncms, tune_ncms;
  for (std::size_t r : ncm_rows_of(data, index, base_train)) base_ncms.push_back(data.ncms[r]);
  for (std::size_t r : ncm_rows_of(data, index, tune)) tune_ncms.push_back(data.ncms[r]);
  if (base_ncms.empty() || tune_ncms.empty()) throw ContractViolation("no matrices in base-train or tune coils");
  std::vector<double> entries;
  for (const auto& s : base_ncms) entries.insert(entries.end(), s.matrix.values().begin(), s.matrix.values().end());
  const std::string_view entry_name[] = {"ncm_entry"};
  const Normalizer ncm_norm = Normalizer::fit(entries, 1, entry_name);
  diag.ncm_normalizer = record_of(ncm_norm, base_ncms.size());
  diag.base_train_matrices = base_ncms.size();

  std::vector<NcmSample> balanced;
  if (config.augment.enabled) {
    std::mt19937_64 rng(mix_seed(seed, 2));
    balanced = balance_to_ratio(base_ncms, config.augment.target_ratio, rng, {config.augment.full_expansion});
    diag.augmented_matrices = balanced.size() - base_ncms.size();
  }
  const LabeledSet tune_set = matrix_set(tune_ncms, &ncm_norm);
  const LabeledSet measured_set = matrix_set(base_ncms, &ncm_norm);
  const LabeledSet augmented_set = config.augment.enabled ? matrix_set(balanced, &ncm_norm) : LabeledSet{};

  for (CnnVariant v : trained_variants(config)) {
    const NetworkSpec spec = build_cnn(v, config.cnn.cnn3_dropout);
    TrainConfig cfg = config.cnn.train;
    cfg.seed = mix_seed(seed, 10 + static_cast<std::uint64_t>(v));
    auto fit = [&](const LabeledSet& set, bool ablation) {
      const std::string stage = cnn_stage_name(v, ablation);
      say(log, fold_tag(fold) + "training " + stage + " on " + std::to_string(set.size()) + " matrices");
      TrainedModel m = train(spec, set, tune_set, cfg);
      m.normalizer = ncm_norm;
      m.fold = fold;
      m.training_coils = fitted_on;
      diag.selected_epochs[stage] = m.selected_epoch;
      out.cnns.emplace(stage, std::move(m));
    };
    if (config.augment.enabled) {
      fit(augmented_set, false);
      const bool listed = std::find(config.cnn.variants.begin(), config.cnn.variants.end(), v) != config.cnn.variants.end();
      if (config.augment.ablation && listed) fit(measured_set, true);
    } else {
      fit(measured_set, false);
    }
  }
  return out;
}

Dataset load_dataset(const RunConfig& config) {
  if (config.synthetic_data()) return generate_synthetic(config.synthetic);
  Dataset data;
  data.channels = load_channel_table(*config.channel_table);
  data.ncms = load_ncm_records(*config.ncm_table);
  data.validate_channel_events();
  return data;
}

FoldPlan plan_folds(const RunConfig& config, const Dataset& data) {
  std::vector<std::pair<std::string, Label>> coils;
  for (const auto& [id, records] : data.coils()) coils.emplace_back(id, records.label);
  return group_kfold(coils, config.cv.folds, mix_seed(config.seed, 0), config.cv.base_fraction);
}

namespace {

struct FoldWork {
  FoldResult result;
  std::vector<MetaFeatureRow> meta_rows;
  std::uint64_t seed = 0;
};

Label vote(double p_broken) { return p_broken >= 0.5 ? Label::broken : Label::normal; }

void run_fold(const RunConfig& config, const Dataset& data, const CoilIndex& index, const Fold& fold,
              FoldWork& work, const Logger& log) {
  FoldResult& result = work.result;
  const std::size_t f = result.index;
  BaseModels models = train_base_models(config, data, fold.base_train, fold.tune, f, work.seed, log);
  result.diagnostics = std::move(models.diagnostics);
  FoldDiagnostics& diag = result.diagnostics;
  diag.test_coils = fold.test;

  for (const auto& coil : fold.test)
    if (std::binary_search(models.fcn.training_coils.begin(), models.fcn.training_coils.end(), coil))
      throw ContractViolation("test coil '" + coil + "' is also a fit coil");

  // Channel-level FCN.
  const auto test_rows = channel_rows_of(index, fold.test);
  if (test_rows.empty()) throw ContractViolation("test coils carry no channel rows");
  const auto channel_p = predict_proba_batch(models.fcn, channel_batch(data, test_rows));
  std::vector<Label> predicted, actual;
  for (std::size_t i = 0; i < test_rows.size(); ++i) {
    predicted.push_back(vote(channel_p[i]));
    actual.push_back(data.channels[test_rows[i]].label);
  }
  result.stages[kStageFcnChannel] = compute_metrics(predicted, actual);

  // Coil-level CNNs: mean probability over the coil's measured matrices.
  const auto test_ncm_rows = ncm_rows_of(data, index, fold.test);
  for (std::size_t r : test_ncm_rows)
    if (data.ncms[r].provenance != Provenance::measured) ++diag.test_augmented;
  if (diag.test_augmented != 0) throw ContractViolation("augmented matrices reached the test fold");
  std::vector<NcmSample> test_ncms;
  for (std::size_t r : test_ncm_rows) test_ncms.push_back(data.ncms[r]);
  if (test_ncms.empty()) throw ContractViolation("test coils carry no matrices");
  const Tensor raw_test = matrix_set(test_ncms, nullptr).inputs;
  const auto stages = stage_names(config);
  for (const auto& [stage, model] : models.cnns) {
    if (std::find(stages.begin(), stages.end(), stage) == stages.end()) continue;
    const auto p = predict_proba_batch(model, raw_test);
    std::map<std::string, std::pair<double, std::size_t>> per_coil;
    for (std::size_t i = 0; i < test_ncms.size(); ++i) {
      auto& acc = per_coil[test_ncms[i].coil_id];
      acc.first += p[i];
      ++acc.second;
    }
    predicted.clear();
    actual.clear();
    for (const auto& [coil, acc] : per_coil) {
      predicted.push_back(vote(acc.first / static_cast<double>(acc.second)));
      actual.push_back(index.at(coil).label);
    }
    result.stages[stage] = compute_metrics(predicted, actual);
  }

  // Meta rows for stacking and the min-aggregated FCN verdict.
  const MetaFeatureSet meta =
      build_meta_features(models.fcn, models.cnns.at(cnn_stage_name(config.cnn.stacked)), data, fold.test, f);
  diag.meta_rows = meta.rows.size();
  diag.meta_skipped = meta.skipped;
  if (meta.skipped > 0) say(log, "fold " + std::to_string(f) + ": skipped " + std::to_string(meta.skipped) +
                                     " coils lacking a data level");
  if (meta.rows.empty()) throw ContractViolation("no coil carries both data levels");
  predicted.clear();
  actual.clear();
  for (const auto& row : meta.rows) {
    // fcn_min is the lowest per-channel probability of class normal.
    predicted.push_back(row.fcn_min < 0.5 ? Label::broken : Label::normal);
    actual.push_back(row.label);
  }
  result.stages[kStageFcnCoil] = compute_metrics(predicted, actual);
  work.meta_rows = meta.rows;
}

ForestParams seeded(ForestParams p, std::uint64_t seed) {
  p.seed = seed;
  return p;
}

// Cross-fitted meta predictions for `rows`; adds the stacked stages of each
// row's fold to `results`.
void stack(const RunConfig& config, std::span<const MetaFeatureRow> rows, std::span<const std::size_t> fold_of,
           std::uint64_t seed, std::vector<FoldWork>& works) {
  struct Learner {
    const char* stage;
    ForestParams params;
  };
  std::vector<Learner> learners{{kStageStacked, seeded(config.meta.forest, mix_seed(seed, 3))}};
  if (config.meta.decision_tree) {
    learners.push_back({kStageStackedTree, seeded(ForestParams::decision_tree(config.meta.forest.max_depth,
                                                                              config.meta.forest.min_samples_leaf),
                                                  mix_seed(seed, 3))});
  }
  for (const auto& learner : learners) {
    const auto predictions = stacked_cross_fit(rows, learner.params, mix_seed(seed, 4));
    std::map<std::size_t, std::pair<std::vector<Label>, std::vector<Label>>> by_fold;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      by_fold[fold_of[i]].first.push_back(predictions[i].label);
      by_fold[fold_of[i]].second.push_back(rows[i].label);
    }
    for (const auto& [f, pa] : by_fold) works[f].result.stages[learner.stage] = compute_metrics(pa.first, pa.second);
  }
}

}  // namespace

EvalReport run_pipeline(const RunConfig& config, const Dataset& data, const Logger& log) {
  config.validate();
  const FoldPlan plan = plan_folds(config, data);
  const CoilIndex index = data.coils();
  const std::size_t k = plan.folds.size();

  std::vector<FoldWork> works(k);
  for (std::size_t f = 0; f < k; ++f) {
    works[f].result.index = f;
    works[f].seed = mix_seed(config.seed, 1000 + f);
    works[f].result.diagnostics.test_coils = plan.folds[f].test;
    works[f].result.diagnostics.base_train_coils = plan.folds[f].base_train;
    works[f].result.diagnostics.tune_coils = plan.folds[f].tune;
  }

  std::mutex log_mutex;
  const Logger safe_log = [&](const std::string& text) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    log(text);
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f; (f = next++) < k;) {
      FoldWork& work = works[f];
      try {
        run_fold(config, data, index, plan.folds[f], work, safe_log);
        if (!config.meta.pooled) {
          const std::vector<std::size_t> fold_of(work.meta_rows.size(), f);
          stack(config, work.meta_rows, fold_of, work.seed, works);
        }
        work.result.ok = true;
        safe_log("fold " + std::to_string(f) + ": done");
      } catch (const std::exception& e) {
        work.result.ok = false;
        work.result.error = e.what();
        work.result.stages.clear();
        safe_log("fold " + std::to_string(f) + ": failed: " + e.what());
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t j = 1; j < std::min(config.jobs, k); ++j) pool.emplace_back(worker);
    worker();
  }

  if (config.meta.pooled) {
    std::vector<MetaFeatureRow> rows;
    std::vector<std::size_t> fold_of;
    for (std::size_t f = 0; f < k; ++f) {
      if (!works[f].result.ok) continue;
      rows.insert(rows.end(), works[f].meta_rows.begin(), works[f].meta_rows.end());
      fold_of.insert(fold_of.end(), works[f].meta_rows.size(), f);
    }
    try {
      stack(config, rows, fold_of, mix_seed(config.seed, 2), works);
    } catch (const std::exception& e) {
      for (auto& w : works) {
        if (!w.result.ok) continue;
        w.result.ok = false;
        w.result.error = std::string("pooled stacking failed: ") + e.what();
        w.result.stages.clear();
      }
      safe_log(std::string("pooled stacking failed: ") + e.what());
    }
  }

  EvalReport report;
  report.config_json = config_to_json(config);
  report.fingerprint = config_fingerprint(config);
  report.stages = stage_names(config);
  for (auto& w : works) report.folds.push_back(std::move(w.result));
  for (const auto& stage : report.stages) {
    std::vector<Metrics> per_fold;
    for (const auto& fold : report.folds) {
      const auto it = fold.stages.find(stage);
      if (fold.ok && it != fold.stages.end()) per_fold.push_back(it->second);
    }
    if (per_fold.empty()) continue;
    report.summary[stage] = {average_metrics(per_fold), pooled_metrics(per_fold), per_fold.size()};
  }
  return report;
}

EvalReport run_pipeline(const RunConfig& config, const Logger& log) {
  config.validate();
  const Dataset data = load_dataset(config);
  return run_pipeline(config, data, log);
}

}  // namespace coilwatch

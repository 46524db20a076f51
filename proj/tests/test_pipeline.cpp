#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "coilwatch/config.hpp"
#include "coilwatch/cv.hpp"
#include "coilwatch/ensemble.hpp"
#include "coilwatch/error.hpp"
#include "coilwatch/pipeline.hpp"
#include "fixtures.hpp"
#include "leak_check.hpp"

namespace coilwatch {
namespace {

std::vector<std::pair<std::string, Label>> make_coils(std::size_t n, std::size_t broken) {
  std::vector<std::pair<std::string, Label>> out;
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "coil%03zu", i);
    out.emplace_back(id, i < broken ? Label::broken : Label::normal);
  }
  return out;
}

MetaFeatureRow meta_row(std::size_t i, bool broken) {
  MetaFeatureRow r;
  r.coil_id = "c" + std::to_string(i);
  r.label = broken ? Label::broken : Label::normal;
  r.fcn_min = broken ? 0.2 : 0.9;
  r.fcn_mean = 0.95;
  r.cnn_prob = broken ? 0.8 + 0.001 * static_cast<double>(i) : 0.1;
  return r;
}

TEST(GroupKFold, PartitionsCoilsAndBalancesBroken) {
  const auto coils = make_coils(103, 13);
  const FoldPlan plan = group_kfold(coils, 10, 5);
  plan.validate();
  std::size_t min_size = 1000, max_size = 0, min_b = 1000, max_b = 0;
  for (const Fold& f : plan.folds) {
    min_size = std::min(min_size, f.test.size());
    max_size = std::max(max_size, f.test.size());
    const auto b = static_cast<std::size_t>(std::count_if(f.test.begin(), f.test.end(), [](const std::string& c) {
      return c < "coil013";
    }));
    min_b = std::min(min_b, b);
    max_b = std::max(max_b, b);
    const double fit = static_cast<double>(f.base_train.size() + f.tune.size());
    EXPECT_NEAR(static_cast<double>(f.base_train.size()), 0.7 * fit, 1.0);
  }
  EXPECT_LE(max_size - min_size, 1u);
  EXPECT_LE(max_b - min_b, 1u);
  EXPECT_EQ(plan.test_fold_of.size(), 103u);
}

TEST(GroupKFold, SeededAndRejectsBadInput) {
  const auto coils = make_coils(30, 5);
  EXPECT_EQ(group_kfold(coils, 3, 1).test_fold_of, group_kfold(coils, 3, 1).test_fold_of);
  EXPECT_NE(group_kfold(coils, 3, 1).test_fold_of, group_kfold(coils, 3, 2).test_fold_of);
  EXPECT_THROW(group_kfold(coils, 1, 1), ContractViolation);
  EXPECT_THROW(group_kfold(coils, 31, 1), ContractViolation);
  auto dup = coils;
  dup.push_back(dup.front());
  EXPECT_THROW(group_kfold(dup, 3, 1), ContractViolation);
}

TEST(Aggregation, CoilSummary) {
  std::vector<double> p(20, 0.2);
  p[0] = 0.0;
  p[1] = 0.4;
  p[2] = 0.4;
  p[3] = 0.0;
  // 16 × 0.2 plus {0, 0.4, 0.4, 0}: mean 0.2.
  const ProbabilitySummary s = aggregate_coil(p);
  EXPECT_EQ(s.min, 0.0);
  EXPECT_NEAR(s.mean, 0.2, 1e-15);
  EXPECT_NEAR(s.stddev, std::sqrt(4 * 0.04 / 20.0), 1e-15);
  std::vector<double> flat(20, 0.3);
  EXPECT_NEAR(aggregate_coil(flat).stddev, 0.0, 1e-15);
  EXPECT_THROW(aggregate_coil(std::span<const double>(p.data(), 19)), ContractViolation);
  const double three[] = {0.2, 0.0, 0.4};
  const ProbabilitySummary t = summarize_probabilities(three);
  EXPECT_EQ(t.min, 0.0);
  EXPECT_NEAR(t.stddev, 0.16330, 1e-5);
  EXPECT_NEAR(t.mean, 0.2, 1e-15);
}

TEST(Stacking, HalfSplitIsStratified) {
  std::vector<MetaFeatureRow> rows;
  for (std::size_t i = 0; i < 100; ++i) rows.push_back(meta_row(i, i % 5 == 0));
  const MetaSplit s = stratified_half_split(rows, 3);
  EXPECT_EQ(s.fit.size(), 50u);
  EXPECT_EQ(s.held_out.size(), 50u);
  std::size_t broken = 0;
  for (std::size_t i : s.fit) broken += rows[i].label == Label::broken;
  EXPECT_EQ(broken, 10u);
  std::set<std::size_t> all(s.fit.begin(), s.fit.end());
  all.insert(s.held_out.begin(), s.held_out.end());
  EXPECT_EQ(all.size(), 100u);
}

TEST(Stacking, CrossFitPredictsEveryRow) {
  std::vector<MetaFeatureRow> rows;
  for (std::size_t i = 0; i < 40; ++i) rows.push_back(meta_row(i, i % 4 == 0));
  ForestParams p;
  p.tree_count = 10;
  const auto preds = stacked_cross_fit(rows, p, 7);
  ASSERT_EQ(preds.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(preds[i].label, rows[i].label);
  const StackedModel m = stacked_fit(rows, p, 7);
  EXPECT_EQ(m.held_out_metrics.f_score, 1.0);
}

TEST(Stacking, DegenerateMetaRows) {
  std::vector<MetaFeatureRow> rows;
  for (std::size_t i = 0; i < 10; ++i) rows.push_back(meta_row(i, false));
  EXPECT_THROW(stacked_fit(rows, ForestParams{}, 1), TrainingDegeneracyError);
  rows[0] = meta_row(0, true);
  EXPECT_THROW(stacked_fit(rows, ForestParams{}, 1), ContractViolation);
}

TEST(MetaFeatures, AssembledFromBaseProbabilities) {
  SyntheticSpec spec;
  spec.coils = 4;
  spec.measurements_per_coil = 2;
  spec.noise_samples = 8;
  const Dataset d = generate_synthetic(spec);
  std::vector<double> channel_p(d.channels.size(), 0.1), ncm_p(d.ncms.size(), 0.3);
  const auto coils = d.coils();
  const std::string first = coils.begin()->first;
  channel_p[coils.begin()->second.channel_rows[0]] = 0.9;
  const std::string wanted[] = {first, "missing"};
  const MetaFeatureSet set = assemble_meta_features(d, wanted, channel_p, ncm_p);
  ASSERT_EQ(set.rows.size(), 1u);
  EXPECT_EQ(set.skipped, 1u);
  const MetaFeatureRow& r = set.rows[0];
  EXPECT_EQ(r.coil_id, first);
  // P(normal) = 0.1 for the damaged channel in one of two events.
  EXPECT_NEAR(r.fcn_min, (0.1 + 0.9) / 2.0, 1e-12);
  EXPECT_NEAR(r.cnn_prob, 0.3, 1e-15);
}

TEST(MetaFeatures, LeakGuard) {
  const RunConfig config = testing::tiny_config(3);
  const Dataset d = load_dataset(config);
  const FoldPlan plan = plan_folds(config, d);
  const Fold& f = plan.folds[0];
  const BaseModels models = train_base_models(config, d, f.base_train, f.tune, 0, 11);
  const TrainedModel& cnn = models.cnns.at("cnn1");
  EXPECT_NO_THROW(build_meta_features(models.fcn, cnn, d, f.test, 0));
  EXPECT_THROW(build_meta_features(models.fcn, cnn, d, f.test, 1), ContractViolation);
  EXPECT_THROW(build_meta_features(models.fcn, cnn, d, f.tune, 0), ContractViolation);
}

TEST(Config, JsonRoundTripAndOverlay) {
  RunConfig c = testing::tiny_config(9);
  c.augment.full_expansion = true;
  c.cnn.variants = {CnnVariant::cnn3, CnnVariant::cnn1};
  const std::string text = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(text)), text);
  EXPECT_EQ(config_fingerprint(config_from_json(text)), config_fingerprint(c));
  const RunConfig o = config_from_json(R"({"cv": {"folds": 4}})", c);
  EXPECT_EQ(o.cv.folds, 4u);
  EXPECT_EQ(o.synthetic.coils, 48u);
  EXPECT_NE(config_fingerprint(o), config_fingerprint(c));
}

TEST(Config, UnknownKeyAndBadTypeNameThePath) {
  try {
    config_from_json(R"({"augment": {"ratio": 0.3}})");
    FAIL();
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("augment.ratio"), std::string::npos) << e.what();
  }
  try {
    config_from_json(R"({"cv": {"folds": "ten"}})");
    FAIL();
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("cv.folds"), std::string::npos) << e.what();
  }
  RunConfig bad;
  bad.cv.folds = 1;
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(Pipeline, TinyRunIsLeakFreeAndComplete) {
  const RunConfig config = testing::tiny_config(4);
  const Dataset data = load_dataset(config);
  const EvalReport report = run_pipeline(config, data);
  EXPECT_EQ(report.failed_folds(), 0u);
  EXPECT_EQ(testing::leak_violation(config, data, report), "");
  EXPECT_EQ(report.stages, stage_names(config));
  for (const auto& stage : report.stages) {
    ASSERT_TRUE(report.summary.count(stage)) << stage;
    const StageSummary& s = report.summary.at(stage);
    EXPECT_EQ(s.folds, 3u);
    EXPECT_EQ(s.pooled.f_score, harmonic_f(s.pooled.precision, s.pooled.recall));
  }
  // Coil-level stages score every coil once.
  EXPECT_EQ(report.summary.at(kStageFcnCoil).pooled.counts.total(), 48u);
  EXPECT_EQ(report.summary.at(kStageStacked).pooled.counts.total(), 48u);
  EXPECT_EQ(report.summary.at(kStageFcnChannel).pooled.counts.total(), 48u * 20u);
}

TEST(Pipeline, JobsDoNotChangeResults) {
  RunConfig config = testing::tiny_config(5);
  const EvalReport one = run_pipeline(config);
  config.jobs = 3;
  EvalReport three = run_pipeline(config);
  // The config echo records the job count; everything else must agree.
  three.config_json = one.config_json;
  three.fingerprint = one.fingerprint;
  EXPECT_EQ(report_to_json(three), report_to_json(one));
}

TEST(Report, RoundTripAndRendering) {
  const EvalReport report = run_pipeline(testing::tiny_config(6));
  const std::string json = report_to_json(report);
  EXPECT_EQ(report_to_json(report_from_json(json)), json);
  const std::string text = render_text(report);
  EXPECT_NE(text.find("stacked"), std::string::npos);
  EXPECT_NE(text.find("pooled"), std::string::npos);
  const std::string csv = render_scores_csv(report);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "stage,aggregate,accuracy,precision,recall,f_score");
  const auto dir = std::filesystem::temp_directory_path() / "coilwatch_report_test";
  write_report(report, dir);
  EXPECT_EQ(report_to_json(read_report(dir / "report.json")), json);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(report_from_json("{\"format\": \"other\"}"), ValidationError);
}

TEST(Pipeline, FoldFailureIsReportedNotThrown) {
  RunConfig config = testing::tiny_config(7);
  config.meta.pooled = false;  // per-fold meta halves are too small here
  config.synthetic.broken_fraction = 0.05;
  const EvalReport report = run_pipeline(config);
  for (const FoldResult& f : report.folds)
    if (!f.ok) EXPECT_FALSE(f.error.empty());
  EXPECT_EQ(report.folds.size(), 3u);
}

}  // namespace
}  // namespace coilwatch

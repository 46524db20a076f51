#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coilwatch/config.hpp"
#include "coilwatch/cv.hpp"
#include "coilwatch/data.hpp"
#include "coilwatch/ensemble.hpp"
#include "coilwatch/metrics.hpp"
#include "coilwatch/network.hpp"

namespace coilwatch {

using Logger = std::function<void(const std::string&)>;

// Stage names used in reports.
inline constexpr const char* kStageFcnChannel = "fcn_channel";
inline constexpr const char* kStageFcnCoil = "fcn_coil";
inline constexpr const char* kStageStacked = "stacked";
inline constexpr const char* kStageStackedTree = "stacked_tree";
/// "cnn2", or "cnn2_no_aug" for the augmentation-ablation twin.
std::string cnn_stage_name(CnnVariant variant, bool ablation = false);

/// Stages a run with `config` reports, in table order.
std::vector<std::string> stage_names(const RunConfig& config);

struct NormalizerRecord {
  std::vector<double> mean;
  std::vector<double> stddev;
  /// Number of rows (channel samples or matrices) the statistics came from.
  std::size_t fit_rows = 0;
};

struct FoldDiagnostics {
  std::vector<std::string> test_coils;
  std::vector<std::string> base_train_coils;
  std::vector<std::string> tune_coils;
  NormalizerRecord channel_normalizer;
  NormalizerRecord ncm_normalizer;
  std::size_t base_train_matrices = 0;
  std::size_t augmented_matrices = 0;
  /// Augmented matrices among the matrices scored for the test coils; always 0.
  std::size_t test_augmented = 0;
  std::size_t meta_rows = 0;
  std::size_t meta_skipped = 0;
  /// Epoch kept for each trained network, keyed by "fcn" or a CNN stage name.
  std::map<std::string, std::size_t> selected_epochs;
};

struct FoldResult {
  std::size_t index = 0;
  bool ok = false;
  std::string error;
  FoldDiagnostics diagnostics;
  std::map<std::string, Metrics> stages;
};

struct StageSummary {
  /// Arithmetic mean of the per-fold metrics.
  Metrics mean;
  /// Metrics of the confusion counts summed over folds.
  Metrics pooled;
  std::size_t folds = 0;
};

struct EvalReport {
  std::string config_json;
  std::string fingerprint;
  std::vector<std::string> stages;
  std::vector<FoldResult> folds;
  std::map<std::string, StageSummary> summary;

  std::size_t failed_folds() const;
};

/// Base learners of one fold (or of a standalone training run).
struct BaseModels {
  TrainedModel fcn;
  /// Keyed by stage name ("cnn2", "cnn2_no_aug", ...).
  std::map<std::string, TrainedModel> cnns;
  FoldDiagnostics diagnostics;
};

/// Fits normalizers on the base-train coils, balances their matrices, and
/// trains the FCN plus every CNN the config asks for. `fold` tags the models
/// for the meta-feature leak guard.
BaseModels train_base_models(const RunConfig& config, const Dataset& data, std::span<const std::string> base_train,
                             std::span<const std::string> tune, std::optional<std::size_t> fold,
                             std::uint64_t seed, const Logger& log = {});

/// Loads or generates the dataset named by `config`.
Dataset load_dataset(const RunConfig& config);

/// Grouped cross-validation of every stage. Fold failures are recorded in
/// the report instead of thrown.
EvalReport run_pipeline(const RunConfig& config, const Dataset& data, const Logger& log = {});
EvalReport run_pipeline(const RunConfig& config, const Logger& log = {});

/// The fold plan run_pipeline uses for `data` under `config`.
FoldPlan plan_folds(const RunConfig& config, const Dataset& data);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
/// Plain-text tables: scores and confusion rates per stage, mean and pooled.
std::string render_text(const EvalReport& report);
/// Per-stage scores in percent, one row per (stage, aggregate).
std::string render_scores_csv(const EvalReport& report);

/// Writes report.json, report.txt and scores.csv into `dir`.
void write_report(const EvalReport& report, const std::filesystem::path& dir);
EvalReport read_report(const std::filesystem::path& path);

}  // namespace coilwatch

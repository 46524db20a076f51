#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coilwatch/error.hpp"
#include "coilwatch/pipeline.hpp"

namespace coilwatch {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "coilwatch-report";
constexpr int kVersion = 1;

json metrics_to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f_score", m.f_score},
          {"tn", m.counts.tn},
          {"fp", m.counts.fp},
          {"fn", m.counts.fn},
          {"tp", m.counts.tp},
          {"tn_rate", m.tn_rate},
          {"fp_rate", m.fp_rate},
          {"fn_rate", m.fn_rate},
          {"tp_rate", m.tp_rate},
          {"negative_share", m.negative_share},
          {"positive_share", m.positive_share}};
}

Metrics metrics_from_json(const json& j) {
  Metrics m;
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f_score = j.at("f_score").get<double>();
  m.counts = {j.at("tn").get<std::size_t>(), j.at("fp").get<std::size_t>(), j.at("fn").get<std::size_t>(),
              j.at("tp").get<std::size_t>()};
  m.tn_rate = j.at("tn_rate").get<double>();
  m.fp_rate = j.at("fp_rate").get<double>();
  m.fn_rate = j.at("fn_rate").get<double>();
  m.tp_rate = j.at("tp_rate").get<double>();
  m.negative_share = j.at("negative_share").get<double>();
  m.positive_share = j.at("positive_share").get<double>();
  return m;
}

json normalizer_to_json(const NormalizerRecord& n) {
  return {{"mean", n.mean}, {"stddev", n.stddev}, {"fit_rows", n.fit_rows}};
}

NormalizerRecord normalizer_from_json(const json& j) {
  return {j.at("mean").get<std::vector<double>>(), j.at("stddev").get<std::vector<double>>(),
          j.at("fit_rows").get<std::size_t>()};
}

json fold_to_json(const FoldResult& f) {
  const FoldDiagnostics& d = f.diagnostics;
  json stages = json::object();
  for (const auto& [name, m] : f.stages) stages[name] = metrics_to_json(m);
  return {{"index", f.index},
          {"ok", f.ok},
          {"error", f.error},
          {"test_coils", d.test_coils},
          {"base_train_coils", d.base_train_coils},
          {"tune_coils", d.tune_coils},
          {"channel_normalizer", normalizer_to_json(d.channel_normalizer)},
          {"ncm_normalizer", normalizer_to_json(d.ncm_normalizer)},
          {"base_train_matrices", d.base_train_matrices},
          {"augmented_matrices", d.augmented_matrices},
          {"test_augmented", d.test_augmented},
          {"meta_rows", d.meta_rows},
          {"meta_skipped", d.meta_skipped},
          {"selected_epochs", d.selected_epochs},
          {"stages", stages}};
}

FoldResult fold_from_json(const json& j) {
  FoldResult f;
  f.index = j.at("index").get<std::size_t>();
  f.ok = j.at("ok").get<bool>();
  f.error = j.at("error").get<std::string>();
  FoldDiagnostics& d = f.diagnostics;
  d.test_coils = j.at("test_coils").get<std::vector<std::string>>();
  d.base_train_coils = j.at("base_train_coils").get<std::vector<std::string>>();
  d.tune_coils = j.at("tune_coils").get<std::vector<std::string>>();
  d.channel_normalizer = normalizer_from_json(j.at("channel_normalizer"));
  d.ncm_normalizer = normalizer_from_json(j.at("ncm_normalizer"));
  d.base_train_matrices = j.at("base_train_matrices").get<std::size_t>();
  d.augmented_matrices = j.at("augmented_matrices").get<std::size_t>();
  d.test_augmented = j.at("test_augmented").get<std::size_t>();
  d.meta_rows = j.at("meta_rows").get<std::size_t>();
  d.meta_skipped = j.at("meta_skipped").get<std::size_t>();
  d.selected_epochs = j.at("selected_epochs").get<std::map<std::string, std::size_t>>();
  for (const auto& [name, m] : j.at("stages").items()) f.stages[name] = metrics_from_json(m);
  return f;
}

std::string percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", ratio * 100.0);
  return buf;
}

std::string fixed(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", value);
  return buf;
}

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

void score_table(std::ostream& out, const EvalReport& report, bool pooled) {
  out << pad_right("stage", 16) << pad_left("Accuracy", 10) << pad_left("Precision", 11) << pad_left("Recall", 9)
      << pad_left("F-score", 9) << pad_left("folds", 7) << "\n";
  for (const auto& stage : report.stages) {
    const auto it = report.summary.find(stage);
    if (it == report.summary.end()) {
      out << pad_right(stage, 16) << "  (no successful fold)\n";
      continue;
    }
    const Metrics& m = pooled ? it->second.pooled : it->second.mean;
    out << pad_right(stage, 16) << pad_left(percent(m.accuracy), 10) << pad_left(percent(m.precision), 11)
        << pad_left(percent(m.recall), 9) << pad_left(percent(m.f_score), 9)
        << pad_left(std::to_string(it->second.folds), 7) << "\n";
  }
}

void confusion_table(std::ostream& out, const EvalReport& report) {
  out << pad_right("stage", 16) << pad_left("TN", 8) << pad_left("FP", 8) << pad_left("FN", 8) << pad_left("TP", 8)
      << pad_left("N", 8) << pad_left("P", 8) << "\n";
  for (const auto& stage : report.stages) {
    const auto it = report.summary.find(stage);
    if (it == report.summary.end()) continue;
    const Metrics& m = it->second.mean;
    out << pad_right(stage, 16) << pad_left(fixed(m.tn_rate), 8) << pad_left(fixed(m.fp_rate), 8)
        << pad_left(fixed(m.fn_rate), 8) << pad_left(fixed(m.tp_rate), 8) << pad_left(fixed(m.negative_share), 8)
        << pad_left(fixed(m.positive_share), 8) << "\n";
  }
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
  json folds = json::array();
  for (const auto& f : report.folds) folds.push_back(fold_to_json(f));
  json summary = json::object();
  for (const auto& [stage, s] : report.summary)
    summary[stage] = {{"mean", metrics_to_json(s.mean)}, {"pooled", metrics_to_json(s.pooled)}, {"folds", s.folds}};
  const json j = {{"format", kFormat},
                  {"version", kVersion},
                  {"fingerprint", report.fingerprint},
                  {"config", json::parse(report.config_json)},
                  {"stages", report.stages},
                  {"failed_folds", report.failed_folds()},
                  {"summary", summary},
                  {"folds", folds}};
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != kFormat) throw ValidationError("not a coilwatch report");
    if (j.at("version") != kVersion) throw ValidationError("unsupported report version " + j["version"].dump());
    EvalReport r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.config_json = j.at("config").dump(2);
    r.stages = j.at("stages").get<std::vector<std::string>>();
    for (const auto& f : j.at("folds")) r.folds.push_back(fold_from_json(f));
    for (const auto& [stage, s] : j.at("summary").items())
      r.summary[stage] = {metrics_from_json(s.at("mean")), metrics_from_json(s.at("pooled")),
                          s.at("folds").get<std::size_t>()};
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

std::string render_text(const EvalReport& report) {
  const json config = json::parse(report.config_json);
  std::ostringstream out;
  out << "coilwatch evaluation report\n";
  out << "config fingerprint: " << report.fingerprint << "\n";
  if (config["data"]["channel_table"].is_null()) {
    const json& s = config["synthetic"];
    out << "data: synthetic, " << s["coils"] << " coils, broken fraction " << s["broken_fraction"] << ", seed "
        << s["seed"] << "\n";
  } else {
    out << "data: " << config["data"]["channel_table"].get<std::string>() << ", "
        << config["data"]["ncm_table"].get<std::string>() << "\n";
  }
  const json& aug = config["augment"];
  if (aug["enabled"].get<bool>()) {
    out << "augmentation: on, target broken share " << aug["target_ratio"]
        << (aug["full_expansion"].get<bool>() ? ", full N-1 expansion" : ", on demand") << "\n";
  } else {
    out << "augmentation: off\n";
  }
  out << "meta learner: " << (config["meta"]["pooled"].get<bool>() ? "pooled" : "per fold")
      << " 50/50 cross-fit, forest of " << config["meta"]["forest"]["tree_count"] << " trees\n";
  out << "cnn3/cnn4: valid convolutions with both pooling stages; cnn3 dropout " << config["cnn"]["cnn3_dropout"]
      << "\n";
  out << "folds: " << report.folds.size() << " (" << report.failed_folds() << " failed)\n";
  for (const auto& f : report.folds)
    if (!f.ok) out << "  fold " << f.index << " failed: " << f.error << "\n";

  out << "\nScores, mean over folds (%)\n";
  score_table(out, report, false);
  out << "\nScores, pooled confusion counts (%)\n";
  score_table(out, report, true);
  out << "\nConfusion rates, mean over folds (% of actual class; N/P = class share)\n";
  confusion_table(out, report);
  return out.str();
}

std::string render_scores_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "stage,aggregate,accuracy,precision,recall,f_score\n";
  for (const auto& stage : report.stages) {
    const auto it = report.summary.find(stage);
    if (it == report.summary.end()) continue;
    for (const auto& [label, m] : {std::pair{"mean", it->second.mean}, std::pair{"pooled", it->second.pooled}}) {
      out << stage << "," << label << "," << percent(m.accuracy) << "," << percent(m.precision) << ","
          << percent(m.recall) << "," << percent(m.f_score) << "\n";
    }
  }
  return out.str();
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto put = [&](const char* name, const std::string& text) {
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
  };
  put("report.json", report_to_json(report));
  put("report.txt", render_text(report));
  put("scores.csv", render_scores_csv(report));
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return report_from_json(buffer.str());
}

}  // namespace coilwatch

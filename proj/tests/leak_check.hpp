#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "coilwatch/pipeline.hpp"
#include "coilwatch/preprocessing.hpp"

namespace coilwatch::testing {

/// Empty when the report shows no leakage between fit and test coils;
/// otherwise a description of the first problem found.
inline std::string leak_violation(const RunConfig& config, const Dataset& data, const EvalReport& report) {
  const auto coils = data.coils();
  std::map<std::string, int> test_count;
  for (const FoldResult& f : report.folds) {
    const std::string tag = "fold " + std::to_string(f.index) + ": ";
    if (!f.ok) return tag + "failed: " + f.error;
    const FoldDiagnostics& d = f.diagnostics;
    const std::set<std::string> test(d.test_coils.begin(), d.test_coils.end());
    const std::set<std::string> base(d.base_train_coils.begin(), d.base_train_coils.end());
    const std::set<std::string> tune(d.tune_coils.begin(), d.tune_coils.end());
    for (const auto& c : test) {
      if (base.count(c) || tune.count(c)) return tag + "test coil " + c + " also used for fitting";
      ++test_count[c];
    }
    for (const auto& c : base)
      if (tune.count(c)) return tag + "coil " + c + " in both base-train and tune";
    if (test.size() + base.size() + tune.size() != coils.size()) return tag + "sets do not cover every coil";
    if (d.test_augmented != 0) return tag + "augmented matrices in the test fold";

    // Channel statistics from base-train rows only.
    std::vector<double> rows;
    std::size_t channel_rows = 0;
    std::vector<double> entries;
    std::size_t matrices = 0, broken = 0;
    for (const auto& c : d.base_train_coils) {
      const CoilRecords& rec = coils.at(c);
      for (std::size_t r : rec.channel_rows) {
        rows.insert(rows.end(), data.channels[r].features.begin(), data.channels[r].features.end());
        ++channel_rows;
      }
      for (std::size_t r : rec.ncm_rows) {
        if (data.ncms[r].provenance != Provenance::measured) continue;
        const auto v = data.ncms[r].matrix.values();
        entries.insert(entries.end(), v.begin(), v.end());
        ++matrices;
        broken += data.ncms[r].label == Label::broken;
      }
    }
    const Normalizer channel = Normalizer::fit(rows, kChannelFeatureCount);
    if (channel.mean() != d.channel_normalizer.mean || channel.stddev() != d.channel_normalizer.stddev ||
        channel_rows != d.channel_normalizer.fit_rows) {
      return tag + "channel normalizer does not recompute from base-train rows";
    }
    const Normalizer ncm = Normalizer::fit(entries, 1);
    if (ncm.mean() != d.ncm_normalizer.mean || ncm.stddev() != d.ncm_normalizer.stddev ||
        matrices != d.ncm_normalizer.fit_rows) {
      return tag + "matrix normalizer does not recompute from base-train matrices";
    }
    if (config.augment.enabled &&
        d.augmented_matrices != augmentations_needed(broken, matrices, config.augment.target_ratio)) {
      return tag + "augmented count differs from the base-train requirement";
    }
  }
  for (const auto& [id, rec] : coils)
    if (test_count[id] != 1) return "coil " + id + " is a test coil " + std::to_string(test_count[id]) + " times";
  return {};
}

}  // namespace coilwatch::testing

#include "coilwatch/cv.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

void FoldPlan::validate() const {
  if (folds.size() != k) throw ContractViolation("fold plan: expected " + std::to_string(k) + " folds");
  std::set<std::string> all;
  for (const auto& [coil, fold] : test_fold_of) {
    all.insert(coil);
    if (fold >= k) throw ContractViolation("fold plan: coil '" + coil + "' assigned to fold out of range");
  }
  std::size_t test_total = 0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const Fold& fold = folds[f];
    std::set<std::string> seen;
    auto add = [&](const std::vector<std::string>& part, const char* name) {
      for (const auto& coil : part) {
        if (!seen.insert(coil).second) {
          throw ContractViolation("fold plan: coil '" + coil + "' appears twice in fold " + std::to_string(f) +
                                  " (" + name + ")");
        }
      }
    };
    add(fold.test, "test");
    add(fold.base_train, "base_train");
    add(fold.tune, "tune");
    if (seen != all) throw ContractViolation("fold plan: fold " + std::to_string(f) + " does not cover every coil");
    for (const auto& coil : fold.test) {
      if (test_fold_of.at(coil) != f) {
        throw ContractViolation("fold plan: coil '" + coil + "' tested in fold " + std::to_string(f) +
                                " but assigned to fold " + std::to_string(test_fold_of.at(coil)));
      }
    }
    test_total += fold.test.size();
  }
  if (test_total != all.size()) throw ContractViolation("fold plan: test folds do not partition the coils");
}

FoldPlan group_kfold(std::span<const std::pair<std::string, Label>> coils, std::size_t k, std::uint64_t seed,
                     double base_fraction) {
  if (k < 2) throw ContractViolation("group_kfold: need k >= 2");
  if (k > coils.size()) {
    throw ContractViolation("group_kfold: k = " + std::to_string(k) + " exceeds the coil count " +
                            std::to_string(coils.size()));
  }
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) {
    throw ContractViolation("group_kfold: base fraction must lie strictly between 0 and 1");
  }
  std::vector<std::string> broken, normal;
  std::set<std::string> unique;
  for (const auto& [coil, label] : coils) {
    if (!unique.insert(coil).second) throw ContractViolation("group_kfold: duplicate coil id '" + coil + "'");
    (label == Label::broken ? broken : normal).push_back(coil);
  }
  if (broken.empty()) throw ContractViolation("group_kfold: no broken coils");
  std::sort(broken.begin(), broken.end());
  std::sort(normal.begin(), normal.end());

  std::mt19937_64 rng(mix_seed(seed, 0));
  shuffle(broken, rng);
  shuffle(normal, rng);

  FoldPlan plan;
  plan.k = k;
  plan.folds.resize(k);
  std::vector<std::vector<std::string>> fold_broken(k), fold_normal(k);
  std::size_t slot = 0;
  for (const auto& coil : broken) fold_broken[slot++ % k].push_back(coil);
  for (const auto& coil : normal) fold_normal[slot++ % k].push_back(coil);
  for (std::size_t f = 0; f < k; ++f) {
    for (const auto& c : fold_broken[f]) plan.test_fold_of[c] = f;
    for (const auto& c : fold_normal[f]) plan.test_fold_of[c] = f;
  }

  for (std::size_t f = 0; f < k; ++f) {
    Fold& fold = plan.folds[f];
    std::vector<std::string> fit_broken, fit_normal;
    for (std::size_t g = 0; g < k; ++g) {
      auto& tb = g == f ? fold.test : fit_broken;
      auto& tn = g == f ? fold.test : fit_normal;
      tb.insert(tb.end(), fold_broken[g].begin(), fold_broken[g].end());
      tn.insert(tn.end(), fold_normal[g].begin(), fold_normal[g].end());
    }
    std::sort(fit_broken.begin(), fit_broken.end());
    std::sort(fit_normal.begin(), fit_normal.end());
    std::mt19937_64 split_rng(mix_seed(seed, f + 1));
    shuffle(fit_broken, split_rng);
    shuffle(fit_normal, split_rng);

    const std::size_t fit_total = fit_broken.size() + fit_normal.size();
    const auto base_total = static_cast<std::size_t>(std::llround(base_fraction * static_cast<double>(fit_total)));
    std::size_t base_broken = static_cast<std::size_t>(std::llround(base_fraction * static_cast<double>(fit_broken.size())));
    base_broken = std::min(base_broken, std::min(base_total, fit_broken.size()));
    const std::size_t base_normal = std::min(base_total - base_broken, fit_normal.size());

    fold.base_train.assign(fit_broken.begin(), fit_broken.begin() + base_broken);
    fold.base_train.insert(fold.base_train.end(), fit_normal.begin(), fit_normal.begin() + base_normal);
    fold.tune.assign(fit_broken.begin() + base_broken, fit_broken.end());
    fold.tune.insert(fold.tune.end(), fit_normal.begin() + base_normal, fit_normal.end());
    std::sort(fold.test.begin(), fold.test.end());
    std::sort(fold.base_train.begin(), fold.base_train.end());
    std::sort(fold.tune.begin(), fold.tune.end());
  }
  plan.validate();
  return plan;
}

}  // namespace coilwatch

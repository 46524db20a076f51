#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "coilwatch/label.hpp"

namespace coilwatch {

/// Row-major feature matrix with labels.
struct TreeData {
  std::vector<double> features;
  std::size_t width = 0;
  std::vector<Label> labels;

  std::size_t rows() const noexcept { return labels.size(); }
  double at(std::size_t row, std::size_t col) const { return features[row * width + col]; }
};

struct ForestParams {
  std::size_t tree_count = 100;
  /// 0 means unlimited depth.
  std::size_t max_depth = 8;
  std::size_t min_samples_leaf = 2;
  /// Features examined per split; 0 means ceil(sqrt(width)).
  std::size_t features_per_split = 0;
  bool bootstrap = true;
  std::uint64_t seed = 1;

  /// Single decision tree: one tree, no bootstrap, every feature at every split.
  static ForestParams decision_tree(std::size_t max_depth = 8, std::size_t min_samples_leaf = 2);
  void validate(std::size_t width) const;
  std::size_t resolved_features_per_split(std::size_t width) const;

  friend bool operator==(const ForestParams&, const ForestParams&) = default;
};

/// 1 - sum p_i^2 over the two classes. Throws ContractViolation on (0, 0).
double gini(std::size_t normal_count, std::size_t broken_count);

/// A split node sends rows with feature <= threshold left and the rest right.
/// Leaves hold class counts of the training rows that reached them.
struct TreeNode {
  static constexpr std::size_t kLeaf = static_cast<std::size_t>(-1);

  std::size_t feature = kLeaf;
  double threshold = 0.0;
  std::size_t left = 0, right = 0;
  std::size_t normal_count = 0, broken_count = 0;

  bool is_leaf() const noexcept { return feature == kLeaf; }
  double broken_probability() const {
    return static_cast<double>(broken_count) / static_cast<double>(normal_count + broken_count);
  }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

class DecisionTree {
 public:
  DecisionTree() = default;
  DecisionTree(std::vector<TreeNode> nodes, std::size_t width);

  /// Nodes in pre-order; index 0 is the root.
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t depth() const;
  std::size_t leaf_count() const;

  /// Probability of broken at the leaf reached by `row`.
  double predict_proba(std::span<const double> row) const;

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;

 private:
  std::vector<TreeNode> nodes_;
  std::size_t width_ = 0;
};

/// CART with Gini impurity. At each node the candidate features are sampled
/// (when features_per_split < width), every midpoint between consecutive
/// distinct values is tried, and the split with the largest impurity decrease
/// wins; ties go to the lowest feature index, then the lowest threshold.
/// `rows` selects (possibly repeated) training rows; empty means all rows.
DecisionTree fit_tree(const TreeData& data, const ForestParams& params, std::uint64_t seed,
                      std::span<const std::size_t> rows = {});
inline DecisionTree fit_tree(const TreeData& data, const ForestParams& params) {
  return fit_tree(data, params, params.seed);
}

struct ForestPrediction {
  Label label;
  double probability;  // of broken
};

class Forest {
 public:
  Forest() = default;
  Forest(std::vector<DecisionTree> trees, ForestParams params);

  const std::vector<DecisionTree>& trees() const noexcept { return trees_; }
  const ForestParams& params() const noexcept { return params_; }
  std::size_t width() const noexcept { return trees_.empty() ? 0 : trees_.front().width(); }

  /// Mean leaf probability; broken iff probability >= 0.5.
  ForestPrediction predict(std::span<const double> row) const;

  friend bool operator==(const Forest&, const Forest&) = default;

 private:
  std::vector<DecisionTree> trees_;
  ForestParams params_;
};

Forest fit_forest(const TreeData& data, const ForestParams& params);

/// JSON text: parameters plus each tree in pre-order with explicit leaf counts.
std::string forest_to_text(const Forest& forest);
Forest forest_from_text(const std::string& text);
void save_forest(const Forest& forest, const std::filesystem::path& path);
Forest load_forest(const std::filesystem::path& path);

}  // namespace coilwatch

#include "coilwatch/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

ForestParams ForestParams::decision_tree(std::size_t max_depth, std::size_t min_samples_leaf) {
  ForestParams p;
  p.tree_count = 1;
  p.max_depth = max_depth;
  p.min_samples_leaf = min_samples_leaf;
  p.features_per_split = static_cast<std::size_t>(-1);
  p.bootstrap = false;
  return p;
}

std::size_t ForestParams::resolved_features_per_split(std::size_t width) const {
  if (features_per_split == 0) return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(width))));
  return std::min(features_per_split, width);
}

void ForestParams::validate(std::size_t width) const {
  if (tree_count == 0) throw ContractViolation("forest: tree count must be at least 1");
  if (min_samples_leaf == 0) throw ContractViolation("forest: min samples per leaf must be at least 1");
  if (width == 0) throw ContractViolation("forest: feature width must be positive");
  if (features_per_split != static_cast<std::size_t>(-1) && features_per_split > width) {
    throw ContractViolation("forest: features per split (" + std::to_string(features_per_split) +
                            ") exceeds feature count (" + std::to_string(width) + ")");
  }
}

double gini(std::size_t normal_count, std::size_t broken_count) {
  const std::size_t total = normal_count + broken_count;
  if (total == 0) throw ContractViolation("gini: class counts are both zero");
  const double p0 = static_cast<double>(normal_count) / static_cast<double>(total);
  const double p1 = static_cast<double>(broken_count) / static_cast<double>(total);
  return 1.0 - p0 * p0 - p1 * p1;
}

// ---------------------------------------------------------------------------
// DecisionTree

DecisionTree::DecisionTree(std::vector<TreeNode> nodes, std::size_t width) : nodes_(std::move(nodes)), width_(width) {}

std::size_t DecisionTree::depth() const {
  std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
  std::size_t best = 0;
  while (!stack.empty()) {
    auto [id, d] = stack.back();
    stack.pop_back();
    best = std::max(best, d);
    if (!nodes_[id].is_leaf()) {
      stack.emplace_back(nodes_[id].left, d + 1);
      stack.emplace_back(nodes_[id].right, d + 1);
    }
  }
  return best;
}

std::size_t DecisionTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

double DecisionTree::predict_proba(std::span<const double> row) const {
  if (row.size() != width_) {
    throw DimensionError("tree: row has " + std::to_string(row.size()) + " features, model expects " +
                         std::to_string(width_));
  }
  std::size_t id = 0;
  while (!nodes_[id].is_leaf()) id = row[nodes_[id].feature] <= nodes_[id].threshold ? nodes_[id].left : nodes_[id].right;
  return nodes_[id].broken_probability();
}

namespace {

// Split quality (a_l^2 + b_l^2)/n_l + (a_r^2 + b_r^2)/n_r kept as an exact
// fraction; maximizing it minimizes the weighted child Gini impurity.
struct SplitScore {
  __int128 num = 0;
  __int128 den = 1;

  bool better_than(const SplitScore& o) const { return num * o.den > o.num * den; }
};

SplitScore split_score(std::size_t ln, std::size_t lb, std::size_t rn, std::size_t rb) {
  const __int128 nl = ln + lb, nr = rn + rb;
  const __int128 sl = static_cast<__int128>(ln) * ln + static_cast<__int128>(lb) * lb;
  const __int128 sr = static_cast<__int128>(rn) * rn + static_cast<__int128>(rb) * rb;
  return {sl * nr + sr * nl, nl * nr};
}

double midpoint(double lo, double hi) {
  const double mid = lo + (hi - lo) / 2.0;
  return mid < hi ? mid : lo;
}

class TreeBuilder {
 public:
  TreeBuilder(const TreeData& data, const ForestParams& params, std::uint64_t seed)
      : data_(data), params_(params), rng_(seed), mtry_(params.resolved_features_per_split(data.width)) {}

  std::vector<TreeNode> build(std::vector<std::size_t> rows) {
    grow(rows, 0);
    return std::move(nodes_);
  }

 private:
  std::size_t grow(const std::vector<std::size_t>& rows, std::size_t depth) {
    const std::size_t id = nodes_.size();
    nodes_.emplace_back();
    std::size_t normal = 0, broken = 0;
    for (std::size_t r : rows) (data_.labels[r] == Label::broken ? broken : normal)++;
    nodes_[id].normal_count = normal;
    nodes_[id].broken_count = broken;

    const bool pure = normal == 0 || broken == 0;
    const bool depth_capped = params_.max_depth != 0 && depth >= params_.max_depth;
    if (pure || depth_capped || rows.size() < 2 * params_.min_samples_leaf) return id;

    std::vector<std::size_t> features(data_.width);
    for (std::size_t f = 0; f < features.size(); ++f) features[f] = f;
    if (mtry_ < data_.width) {
      for (std::size_t k = 0; k < mtry_; ++k) std::swap(features[k], features[k + uniform_index(rng_, data_.width - k)]);
      features.resize(mtry_);
      std::sort(features.begin(), features.end());
    }

    bool found = false;
    SplitScore best;
    std::size_t best_feature = 0;
    double best_threshold = 0.0;
    std::vector<std::pair<double, Label>> column(rows.size());
    for (std::size_t f : features) {
      for (std::size_t i = 0; i < rows.size(); ++i) column[i] = {data_.at(rows[i], f), data_.labels[rows[i]]};
      std::sort(column.begin(), column.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      std::size_t ln = 0, lb = 0;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        (column[i].second == Label::broken ? lb : ln)++;
        if (column[i].first == column[i + 1].first) continue;
        const std::size_t left = i + 1, right = rows.size() - left;
        if (left < params_.min_samples_leaf || right < params_.min_samples_leaf) continue;
        const SplitScore s = split_score(ln, lb, normal - ln, broken - lb);
        if (!found || s.better_than(best)) {
          found = true;
          best = s;
          best_feature = f;
          best_threshold = midpoint(column[i].first, column[i + 1].first);
        }
      }
    }
    if (!found) return id;

    std::vector<std::size_t> left_rows, right_rows;
    for (std::size_t r : rows) (data_.at(r, best_feature) <= best_threshold ? left_rows : right_rows).push_back(r);
    nodes_[id].feature = best_feature;
    nodes_[id].threshold = best_threshold;
    const std::size_t l = grow(left_rows, depth + 1);
    nodes_[id].left = l;
    const std::size_t r = grow(right_rows, depth + 1);
    nodes_[id].right = r;
    return id;
  }

  const TreeData& data_;
  const ForestParams& params_;
  std::mt19937_64 rng_;
  std::size_t mtry_;
  std::vector<TreeNode> nodes_;
};

void check_data(const TreeData& data) {
  if (data.rows() == 0) throw ContractViolation("fit_tree: no training rows");
  if (data.width == 0 || data.features.size() != data.rows() * data.width) {
    throw DimensionError("fit_tree: " + std::to_string(data.features.size()) + " feature values for " +
                         std::to_string(data.rows()) + " rows of width " + std::to_string(data.width));
  }
}

}  // namespace

DecisionTree fit_tree(const TreeData& data, const ForestParams& params, std::uint64_t seed,
                      std::span<const std::size_t> rows) {
  check_data(data);
  params.validate(data.width);
  std::vector<std::size_t> selected(rows.begin(), rows.end());
  if (selected.empty()) {
    selected.resize(data.rows());
    for (std::size_t i = 0; i < selected.size(); ++i) selected[i] = i;
  }
  for (std::size_t r : selected)
    if (r >= data.rows()) throw ContractViolation("fit_tree: row index out of range");
  TreeBuilder builder(data, params, seed);
  return DecisionTree(builder.build(std::move(selected)), data.width);
}

// ---------------------------------------------------------------------------
// Forest

Forest::Forest(std::vector<DecisionTree> trees, ForestParams params) : trees_(std::move(trees)), params_(params) {
  if (trees_.empty()) throw ContractViolation("forest: needs at least one tree");
}

ForestPrediction Forest::predict(std::span<const double> row) const {
  if (row.size() != width()) {
    throw DimensionError("forest: row has " + std::to_string(row.size()) + " features, model expects " +
                         std::to_string(width()));
  }
  double total = 0.0;
  for (const DecisionTree& t : trees_) total += t.predict_proba(row);
  const double p = total / static_cast<double>(trees_.size());
  return {p >= 0.5 ? Label::broken : Label::normal, p};
}

Forest fit_forest(const TreeData& data, const ForestParams& params) {
  check_data(data);
  params.validate(data.width);
  std::vector<DecisionTree> trees;
  trees.reserve(params.tree_count);
  for (std::size_t t = 0; t < params.tree_count; ++t) {
    const std::uint64_t tree_seed = mix_seed(params.seed, t);
    std::vector<std::size_t> rows(data.rows());
    if (params.bootstrap) {
      std::mt19937_64 rng(mix_seed(tree_seed, 0xB007));
      for (std::size_t& r : rows) r = uniform_index(rng, data.rows());
    } else {
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }
    trees.push_back(fit_tree(data, params, tree_seed, rows));
  }
  return Forest(std::move(trees), params);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::json;

constexpr const char* kForestFormat = "coilwatch-forest";
constexpr int kForestVersion = 1;

void tree_to_json(const DecisionTree& tree, std::size_t id, json& out) {
  const TreeNode& n = tree.nodes()[id];
  if (n.is_leaf()) {
    out.push_back({{"leaf", {n.normal_count, n.broken_count}}});
    return;
  }
  out.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"counts", {n.normal_count, n.broken_count}}});
  tree_to_json(tree, n.left, out);
  tree_to_json(tree, n.right, out);
}

std::size_t tree_from_json(const json& in, std::size_t& cursor, std::vector<TreeNode>& nodes) {
  if (cursor >= in.size()) throw ParseError("forest", 0, "truncated tree");
  const json& j = in[cursor++];
  const std::size_t id = nodes.size();
  nodes.emplace_back();
  if (j.contains("leaf")) {
    nodes[id].normal_count = j["leaf"].at(0);
    nodes[id].broken_count = j["leaf"].at(1);
    if (nodes[id].normal_count + nodes[id].broken_count == 0) throw ParseError("forest", 0, "empty leaf");
    return id;
  }
  nodes[id].feature = j.at("feature");
  nodes[id].threshold = j.at("threshold");
  nodes[id].normal_count = j.at("counts").at(0);
  nodes[id].broken_count = j.at("counts").at(1);
  const std::size_t l = tree_from_json(in, cursor, nodes);
  nodes[id].left = l;
  const std::size_t r = tree_from_json(in, cursor, nodes);
  nodes[id].right = r;
  return id;
}

}  // namespace

std::string forest_to_text(const Forest& forest) {
  const ForestParams& p = forest.params();
  json j;
  j["format"] = kForestFormat;
  j["version"] = kForestVersion;
  j["width"] = forest.width();
  j["params"] = {{"tree_count", p.tree_count},
                 {"max_depth", p.max_depth},
                 {"min_samples_leaf", p.min_samples_leaf},
                 {"features_per_split", p.features_per_split},
                 {"bootstrap", p.bootstrap},
                 {"seed", p.seed}};
  json trees = json::array();
  for (const DecisionTree& t : forest.trees()) {
    json nodes = json::array();
    tree_to_json(t, 0, nodes);
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  return j.dump(1) + "\n";
}

Forest forest_from_text(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != kForestFormat || j.at("version") != kForestVersion) {
      throw ParseError("forest", 0, "not a version-1 forest checkpoint");
    }
    ForestParams p;
    const json& pj = j.at("params");
    p.tree_count = pj.at("tree_count");
    p.max_depth = pj.at("max_depth");
    p.min_samples_leaf = pj.at("min_samples_leaf");
    p.features_per_split = pj.at("features_per_split");
    p.bootstrap = pj.at("bootstrap");
    p.seed = pj.at("seed");
    const std::size_t width = j.at("width");
    std::vector<DecisionTree> trees;
    for (const json& tj : j.at("trees")) {
      std::vector<TreeNode> nodes;
      std::size_t cursor = 0;
      tree_from_json(tj, cursor, nodes);
      if (cursor != tj.size()) throw ParseError("forest", 0, "trailing nodes after tree");
      for (const TreeNode& n : nodes)
        if (!n.is_leaf() && n.feature >= width) throw ParseError("forest", 0, "split feature out of range");
      trees.emplace_back(std::move(nodes), width);
    }
    return Forest(std::move(trees), p);
  } catch (const json::exception& e) {
    throw ParseError("forest", 0, std::string("malformed forest checkpoint: ") + e.what());
  }
}

void save_forest(const Forest& forest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << forest_to_text(forest);
}

Forest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  return forest_from_text(buf.str());
}

}  // namespace coilwatch

#include "coilwatch/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coilwatch/error.hpp"

namespace coilwatch {

using nlohmann::json;

namespace {

json pair_to_json(const NormalBrokenPair& p) {
  return {{"normal_mean", p.normal_mean}, {"normal_sd", p.normal_sd}, {"broken_mean", p.broken_mean},
          {"broken_sd", p.broken_sd}};
}

json train_to_json(const TrainConfig& t) {
  return {{"optimizer",
           {{"kind", t.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
            {"learning_rate", t.optimizer.learning_rate},
            {"beta1", t.optimizer.beta1},
            {"beta2", t.optimizer.beta2},
            {"epsilon", t.optimizer.epsilon}}},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience}};
}

json optional_path(const std::optional<std::filesystem::path>& p) {
  return p ? json(p->string()) : json(nullptr);
}

json to_json_tree(const RunConfig& c) {
  const SyntheticSpec& s = c.synthetic;
  json variants = json::array();
  for (CnnVariant v : c.cnn.variants) variants.push_back(std::string(to_string(v)));
  const ForestParams& f = c.meta.forest;
  return {
      {"data", {{"channel_table", optional_path(c.channel_table)}, {"ncm_table", optional_path(c.ncm_table)}}},
      {"synthetic",
       {{"coils", s.coils},
        {"measurements_per_coil", s.measurements_per_coil},
        {"channel_event_fraction", s.channel_event_fraction},
        {"broken_fraction", s.broken_fraction},
        {"min_broken_channels", s.min_broken_channels},
        {"max_broken_channels", s.max_broken_channels},
        {"noise_level_log_sd", s.noise_level_log_sd},
        {"csp", pair_to_json(s.csp)},
        {"body_coil_ratio", pair_to_json(s.body_coil_ratio)},
        {"csp_isocenter_ratio", pair_to_json(s.csp_isocenter_ratio)},
        {"neighbor_effect", s.neighbor_effect},
        {"ncm_coupling", s.ncm_coupling},
        {"broken_variance_multiplier", s.broken_variance_multiplier},
        {"channel_gain_log_sd", s.channel_gain_log_sd},
        {"noise_samples", s.noise_samples},
        {"seed", s.seed}}},
      {"cv", {{"folds", c.cv.folds}, {"base_fraction", c.cv.base_fraction}}},
      {"fcn", {{"hidden", c.fcn.hidden}, {"dropout", c.fcn.dropout}, {"train", train_to_json(c.fcn.train)}}},
      {"cnn",
       {{"variants", variants},
        {"stacked", std::string(to_string(c.cnn.stacked))},
        {"cnn3_dropout", c.cnn.cnn3_dropout},
        {"train", train_to_json(c.cnn.train)}}},
      {"augment",
       {{"enabled", c.augment.enabled},
        {"target_ratio", c.augment.target_ratio},
        {"full_expansion", c.augment.full_expansion},
        {"ablation", c.augment.ablation}}},
      {"meta",
       {{"forest",
         {{"tree_count", f.tree_count},
          {"max_depth", f.max_depth},
          {"min_samples_leaf", f.min_samples_leaf},
          {"features_per_split", f.features_per_split},
          {"bootstrap", f.bootstrap}}},
        {"pooled", c.meta.pooled},
        {"decision_tree", c.meta.decision_tree}}},
      {"seed", c.seed},
      {"jobs", c.jobs},
  };
}

// Overlays `patch` on `target`, rejecting keys the target does not have and
// values whose JSON type differs from the default's.
void overlay(json& target, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ContractViolation("config: '" + path + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw ContractViolation("config: unknown key '" + where + "'");
    json& slot = target[key];
    if (slot.is_object()) {
      overlay(slot, value, where);
      continue;
    }
    const bool ok = slot.is_null()     ? value.is_null() || value.is_string()
                    : slot.is_string() ? value.is_string() || value.is_null()
                    : slot.is_boolean() ? value.is_boolean()
                    : slot.is_array()   ? value.is_array()
                    : slot.is_number_float() ? value.is_number()
                                             : value.is_number_unsigned() ||
                                                   (value.is_number_integer() && value.get<std::int64_t>() >= 0);
    if (!ok) throw ContractViolation("config: '" + where + "' has the wrong type (" + value.dump() + ")");
    slot = value;
  }
}

template <typename T>
T read(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ContractViolation("config: '" + path + key + "' has an invalid value");
  }
}

NormalBrokenPair read_pair(const json& j, const std::string& path) {
  return {read<double>(j, "normal_mean", path), read<double>(j, "normal_sd", path),
          read<double>(j, "broken_mean", path), read<double>(j, "broken_sd", path)};
}

TrainConfig read_train(const json& j, const std::string& path) {
  TrainConfig t;
  const json& o = j.at("optimizer");
  const std::string op = path + "optimizer.";
  const auto kind = read<std::string>(o, "kind", op);
  if (kind == "adam") {
    t.optimizer.kind = OptimizerKind::adam;
  } else if (kind == "sgd") {
    t.optimizer.kind = OptimizerKind::sgd;
  } else {
    throw ContractViolation("config: '" + op + "kind' must be adam or sgd, got '" + kind + "'");
  }
  t.optimizer.learning_rate = read<double>(o, "learning_rate", op);
  t.optimizer.beta1 = read<double>(o, "beta1", op);
  t.optimizer.beta2 = read<double>(o, "beta2", op);
  t.optimizer.epsilon = read<double>(o, "epsilon", op);
  t.batch_size = read<std::size_t>(j, "batch_size", path);
  t.max_epochs = read<std::size_t>(j, "max_epochs", path);
  t.patience = read<std::size_t>(j, "patience", path);
  return t;
}

CnnVariant read_variant(const json& j, const std::string& where) {
  if (!j.is_string()) throw ContractViolation("config: '" + where + "' must be a variant name");
  try {
    return parse_cnn_variant(j.get<std::string>());
  } catch (const ContractViolation&) {
    throw ContractViolation("config: '" + where + "' names unknown variant '" + j.get<std::string>() + "'");
  }
}

RunConfig from_json_tree(const json& j) {
  RunConfig c;
  const json& d = j.at("data");
  if (!d.at("channel_table").is_null()) c.channel_table = d["channel_table"].get<std::string>();
  if (!d.at("ncm_table").is_null()) c.ncm_table = d["ncm_table"].get<std::string>();

  const json& s = j.at("synthetic");
  const std::string sp = "synthetic.";
  SyntheticSpec& g = c.synthetic;
  g.coils = read<std::size_t>(s, "coils", sp);
  g.measurements_per_coil = read<std::size_t>(s, "measurements_per_coil", sp);
  g.channel_event_fraction = read<double>(s, "channel_event_fraction", sp);
  g.broken_fraction = read<double>(s, "broken_fraction", sp);
  g.min_broken_channels = read<std::size_t>(s, "min_broken_channels", sp);
  g.max_broken_channels = read<std::size_t>(s, "max_broken_channels", sp);
  g.noise_level_log_sd = read<double>(s, "noise_level_log_sd", sp);
  g.csp = read_pair(s.at("csp"), sp + "csp.");
  g.body_coil_ratio = read_pair(s.at("body_coil_ratio"), sp + "body_coil_ratio.");
  g.csp_isocenter_ratio = read_pair(s.at("csp_isocenter_ratio"), sp + "csp_isocenter_ratio.");
  g.neighbor_effect = read<double>(s, "neighbor_effect", sp);
  g.ncm_coupling = read<double>(s, "ncm_coupling", sp);
  g.broken_variance_multiplier = read<double>(s, "broken_variance_multiplier", sp);
  g.channel_gain_log_sd = read<double>(s, "channel_gain_log_sd", sp);
  g.noise_samples = read<std::size_t>(s, "noise_samples", sp);
  g.seed = read<std::uint64_t>(s, "seed", sp);

  c.cv.folds = read<std::size_t>(j.at("cv"), "folds", "cv.");
  c.cv.base_fraction = read<double>(j.at("cv"), "base_fraction", "cv.");

  const json& fcn = j.at("fcn");
  const auto hidden = read<std::vector<std::size_t>>(fcn, "hidden", "fcn.");
  if (hidden.size() != 4) throw ContractViolation("config: 'fcn.hidden' needs exactly 4 sizes");
  std::copy(hidden.begin(), hidden.end(), c.fcn.hidden.begin());
  c.fcn.dropout = read<double>(fcn, "dropout", "fcn.");
  c.fcn.train = read_train(fcn.at("train"), "fcn.train.");

  const json& cnn = j.at("cnn");
  c.cnn.variants.clear();
  for (std::size_t i = 0; i < cnn.at("variants").size(); ++i)
    c.cnn.variants.push_back(read_variant(cnn["variants"][i], "cnn.variants[" + std::to_string(i) + "]"));
  c.cnn.stacked = read_variant(cnn.at("stacked"), "cnn.stacked");
  c.cnn.cnn3_dropout = read<double>(cnn, "cnn3_dropout", "cnn.");
  c.cnn.train = read_train(cnn.at("train"), "cnn.train.");

  const json& a = j.at("augment");
  c.augment.enabled = read<bool>(a, "enabled", "augment.");
  c.augment.target_ratio = read<double>(a, "target_ratio", "augment.");
  c.augment.full_expansion = read<bool>(a, "full_expansion", "augment.");
  c.augment.ablation = read<bool>(a, "ablation", "augment.");

  const json& m = j.at("meta");
  const json& f = m.at("forest");
  const std::string fp = "meta.forest.";
  c.meta.forest.tree_count = read<std::size_t>(f, "tree_count", fp);
  c.meta.forest.max_depth = read<std::size_t>(f, "max_depth", fp);
  c.meta.forest.min_samples_leaf = read<std::size_t>(f, "min_samples_leaf", fp);
  c.meta.forest.features_per_split = read<std::size_t>(f, "features_per_split", fp);
  c.meta.forest.bootstrap = read<bool>(f, "bootstrap", fp);
  c.meta.pooled = read<bool>(m, "pooled", "meta.");
  c.meta.decision_tree = read<bool>(m, "decision_tree", "meta.");

  c.seed = read<std::uint64_t>(j, "seed", "");
  c.jobs = read<std::size_t>(j, "jobs", "");
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (channel_table.has_value() != ncm_table.has_value())
    throw ContractViolation("config: 'data.channel_table' and 'data.ncm_table' must be given together");
  if (synthetic_data()) synthetic.validate();
  if (cv.folds < 2) throw ContractViolation("config: 'cv.folds' must be at least 2");
  if (!(cv.base_fraction > 0.0 && cv.base_fraction < 1.0))
    throw ContractViolation("config: 'cv.base_fraction' must lie in (0, 1)");
  for (std::size_t h : fcn.hidden)
    if (h == 0) throw ContractViolation("config: 'fcn.hidden' sizes must be positive");
  if (!(fcn.dropout >= 0.0 && fcn.dropout < 1.0)) throw ContractViolation("config: 'fcn.dropout' must lie in [0, 1)");
  if (!(cnn.cnn3_dropout >= 0.0 && cnn.cnn3_dropout < 1.0))
    throw ContractViolation("config: 'cnn.cnn3_dropout' must lie in [0, 1)");
  if (cnn.variants.empty()) throw ContractViolation("config: 'cnn.variants' must not be empty");
  fcn.train.validate();
  cnn.train.validate();
  if (!(augment.target_ratio > 0.0 && augment.target_ratio < 1.0))
    throw ContractViolation("config: 'augment.target_ratio' must lie in (0, 1)");
  meta.forest.validate(4);
  if (jobs == 0) throw ContractViolation("config: 'jobs' must be at least 1");
}

std::string config_to_json(const RunConfig& config) { return to_json_tree(config).dump(2); }

RunConfig config_from_json(const std::string& text, const RunConfig& base) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ContractViolation(std::string("config: malformed JSON: ") + e.what());
  }
  json tree = to_json_tree(base);
  overlay(tree, patch, "");
  return from_json_tree(tree);
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return config_from_json(buffer.str(), base);
}

std::string config_fingerprint(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace coilwatch

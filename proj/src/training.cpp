#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "coilwatch/error.hpp"
#include "coilwatch/metrics.hpp"
#include "coilwatch/network.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

void TrainConfig::validate() const {
  if (batch_size < 2) throw ContractViolation("train config: batch size must be at least 2");
  if (patience < 1) throw ContractViolation("train config: patience must be at least 1");
  if (!(optimizer.learning_rate > 0.0)) throw ContractViolation("train config: learning rate must be positive");
}

namespace {

std::size_t sample_size(const LabeledSet& set) {
  if (set.inputs.rank() == 0 || set.inputs.dim(0) != set.labels.size()) {
    throw DimensionError("labeled set: " + std::to_string(set.labels.size()) + " labels for inputs " +
                         to_string(set.inputs.shape()));
  }
  return set.inputs.size() / set.labels.size();
}

Tensor gather(const LabeledSet& set, std::span<const std::size_t> rows) {
  const std::size_t width = sample_size(set);
  Shape shape = set.inputs.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(set.inputs.raw() + rows[i] * width, width, out.raw() + i * width);
  return out;
}

struct TuneScore {
  double loss = 0.0;
  double f_score = 0.0;
};

TuneScore score(const Network& net, const LabeledSet& set) {
  constexpr std::size_t kChunk = 256;
  std::vector<Label> predicted;
  predicted.reserve(set.size());
  double loss = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.size(); start += kChunk) {
    const std::size_t stop = std::min(set.size(), start + kChunk);
    rows.resize(stop - start);
    for (std::size_t i = start; i < stop; ++i) rows[i - start] = i;
    const Tensor probs = net.predict(gather(set, rows));
    for (std::size_t i = start; i < stop; ++i) {
      const double p_broken = probs[(i - start) * 2 + 1];
      const double p_true = set.labels[i] == Label::broken ? p_broken : probs[(i - start) * 2];
      loss -= std::log(std::max(p_true, 1e-12));
      predicted.push_back(p_broken >= 0.5 ? Label::broken : Label::normal);
    }
  }
  return {loss / static_cast<double>(set.size()), compute_metrics(predicted, set.labels).f_score};
}

bool has_batchnorm(const NetworkSpec& spec) {
  return std::any_of(spec.layers.begin(), spec.layers.end(),
                     [](const LayerSpec& l) { return std::holds_alternative<BatchNormLayer>(l); });
}

}  // namespace

TrainedModel train(const NetworkSpec& spec, const LabeledSet& train_set, const LabeledSet& tune_set,
                   const TrainConfig& config) {
  config.validate();
  spec.validate();
  if (train_set.size() == 0 || tune_set.size() == 0) throw ContractViolation("train: train and tune sets must be non-empty");
  (void)sample_size(train_set);
  (void)sample_size(tune_set);
  const auto broken = std::count(train_set.labels.begin(), train_set.labels.end(), Label::broken);
  if (broken == 0 || broken == static_cast<std::ptrdiff_t>(train_set.size())) {
    throw TrainingDegeneracyError("train: training set contains a single class (" +
                                  std::to_string(train_set.size()) + " samples, " + std::to_string(broken) +
                                  " broken)");
  }
  const bool needs_pairs = has_batchnorm(spec);
  if (needs_pairs && train_set.size() < 2) throw ContractViolation("train: batch-norm needs at least 2 training samples");

  TrainedModel model;
  model.config = config;
  model.network = Network(spec, mix_seed(config.seed, 0));
  if (config.max_epochs == 0) return model;

  std::mt19937_64 rng(mix_seed(config.seed, 1));
  Optimizer optimizer(config.optimizer);
  std::vector<Parameter*> params;
  for (Parameter& p : model.network.parameters()) params.push_back(&p);

  Network best = model.network;
  TuneScore best_score{};
  bool have_best = false;
  std::size_t since_improvement = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t e = 1; e <= config.max_epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);

    // Batch boundaries; a trailing singleton joins the previous batch so that
    // batch-norm always sees at least two rows.
    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size)
      batches.emplace_back(start, std::min(order.size(), start + config.batch_size));
    if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches[batches.size() - 2].second = batches.back().second;
      batches.pop_back();
    }

    double loss_sum = 0.0;
    for (const auto& [start, stop] : batches) {
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      std::vector<int> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = class_index(train_set.labels[rows[i]]);
      for (Parameter* p : params) p->zero_grad();
      Tape tape;
      Var logits = model.network.forward_logits(tape, gather(train_set, rows), Mode::train, rng);
      Var loss = softmax_cross_entropy(logits, labels);
      tape.backward(loss);
      optimizer.step(params);
      loss_sum += loss.value()[0] * static_cast<double>(rows.size());
    }

    const TuneScore s = score(model.network, tune_set);
    model.history.push_back({e, loss_sum / static_cast<double>(train_set.size()), s.loss, s.f_score});
    const bool improved = !have_best || s.f_score > best_score.f_score ||
                          (s.f_score == best_score.f_score && s.loss < best_score.loss);
    if (improved) {
      best = model.network;
      best_score = s;
      have_best = true;
      model.selected_epoch = e;
      since_improvement = 0;
    } else if (++since_improvement >= config.patience) {
      break;
    }
  }
  model.network = std::move(best);
  return model;
}

std::vector<double> predict_proba_batch(const TrainedModel& model, const Tensor& batch) {
  Tensor input = batch;
  if (model.normalizer) model.normalizer->transform(input.data());
  const Tensor probs = model.network.predict(input);
  std::vector<double> out(probs.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs[i * 2 + 1];
  return out;
}

double predict_proba(const TrainedModel& model, const Tensor& sample) {
  Shape shape{1};
  shape.insert(shape.end(), sample.shape().begin(), sample.shape().end());
  return predict_proba_batch(model, sample.reshaped(shape)).front();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using nlohmann::json;

constexpr const char* kModelFormat = "coilwatch-model";
constexpr int kModelVersion = 1;

json layer_to_json(const LayerSpec& layer) {
  if (const auto* l = std::get_if<DenseLayer>(&layer)) return {{"type", "dense"}, {"units", l->units}};
  if (const auto* l = std::get_if<ConvLayer>(&layer))
    return {{"type", "conv"}, {"filters", l->filters}, {"padding", l->padding == Padding::same ? "same" : "valid"}};
  if (const auto* l = std::get_if<PoolLayer>(&layer))
    return {{"type", "pool"}, {"kind", l->kind == PoolKind::max ? "max" : "average"}};
  if (std::holds_alternative<FlattenLayer>(layer)) return {{"type", "flatten"}};
  if (std::holds_alternative<BatchNormLayer>(layer)) return {{"type", "batchnorm"}};
  if (const auto* l = std::get_if<DropoutLayer>(&layer)) return {{"type", "dropout"}, {"rate", l->rate}};
  const auto& a = std::get<ActivationLayer>(layer);
  return {{"type", "activation"}, {"kind", a.kind == Activation::relu ? "relu" : "softmax"}};
}

LayerSpec layer_from_json(const json& j) {
  const std::string type = j.at("type");
  if (type == "dense") return DenseLayer{j.at("units").get<std::size_t>()};
  if (type == "conv")
    return ConvLayer{j.at("filters").get<std::size_t>(), j.at("padding") == "same" ? Padding::same : Padding::valid};
  if (type == "pool") return PoolLayer{j.at("kind") == "max" ? PoolKind::max : PoolKind::average};
  if (type == "flatten") return FlattenLayer{};
  if (type == "batchnorm") return BatchNormLayer{};
  if (type == "dropout") return DropoutLayer{j.at("rate").get<double>()};
  if (type == "activation") return ActivationLayer{j.at("kind") == "relu" ? Activation::relu : Activation::softmax};
  throw ParseError("checkpoint", 0, "unknown layer type '" + type + "'");
}

json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  const NetworkSpec& spec = model.network.spec();
  json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  json layers = json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
  j["spec"] = {{"name", spec.name}, {"input_shape", spec.input_shape}, {"layers", layers}};
  const auto& opt = model.config.optimizer;
  j["train_config"] = {{"optimizer", opt.kind == OptimizerKind::adam ? "adam" : "sgd"},
                       {"learning_rate", opt.learning_rate},
                       {"beta1", opt.beta1},
                       {"beta2", opt.beta2},
                       {"epsilon", opt.epsilon},
                       {"batch_size", model.config.batch_size},
                       {"max_epochs", model.config.max_epochs},
                       {"patience", model.config.patience},
                       {"seed", model.config.seed}};
  json params = json::array();
  for (const Parameter& p : model.network.parameters()) {
    json pj = tensor_to_json(p.value);
    pj["name"] = p.name;
    params.push_back(pj);
  }
  j["parameters"] = params;
  json bn = json::array();
  for (const BatchNormState& s : model.network.batchnorm_states())
    bn.push_back({{"running_mean", tensor_to_json(s.running_mean)}, {"running_var", tensor_to_json(s.running_var)}});
  j["batchnorm"] = bn;
  if (model.normalizer) {
    j["normalizer"] = {{"mean", model.normalizer->mean()}, {"stddev", model.normalizer->stddev()}};
  } else {
    j["normalizer"] = nullptr;
  }
  json history = json::array();
  for (const auto& h : model.history)
    history.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"tune_loss", h.tune_loss}, {"tune_f_score", h.tune_f_score}});
  j["history"] = history;
  j["selected_epoch"] = model.selected_epoch;
  j["fold"] = model.fold ? json(*model.fold) : json(nullptr);
  j["training_coils"] = model.training_coils;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  try {
    if (j.at("format") != kModelFormat) throw ParseError(path.string(), 0, "not a model checkpoint");
    if (j.at("version") != kModelVersion) throw ParseError(path.string(), 0, "unsupported checkpoint version");
    NetworkSpec spec;
    spec.name = j.at("spec").at("name");
    spec.input_shape = j.at("spec").at("input_shape").get<Shape>();
    for (const auto& l : j.at("spec").at("layers")) spec.layers.push_back(layer_from_json(l));

    TrainedModel model;
    model.network = Network(spec, 0);
    auto& params = model.network.parameters();
    const auto& pj = j.at("parameters");
    if (pj.size() != params.size()) throw ParseError(path.string(), 0, "parameter count does not match the network");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor value = tensor_from_json(pj[i]);
      if (value.shape() != params[i].value.shape() || pj[i].at("name") != params[i].name) {
        throw ParseError(path.string(), 0, "parameter '" + params[i].name + "' does not match the network");
      }
      params[i].value = std::move(value);
      params[i].zero_grad();
    }
    auto& bn = model.network.batchnorm_states();
    const auto& bj = j.at("batchnorm");
    if (bj.size() != bn.size()) throw ParseError(path.string(), 0, "batch-norm state count does not match the network");
    for (std::size_t i = 0; i < bn.size(); ++i) {
      bn[i].running_mean = tensor_from_json(bj[i].at("running_mean"));
      bn[i].running_var = tensor_from_json(bj[i].at("running_var"));
    }
    const auto& tc = j.at("train_config");
    model.config.optimizer.kind = tc.at("optimizer") == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    model.config.optimizer.learning_rate = tc.at("learning_rate");
    model.config.optimizer.beta1 = tc.at("beta1");
    model.config.optimizer.beta2 = tc.at("beta2");
    model.config.optimizer.epsilon = tc.at("epsilon");
    model.config.batch_size = tc.at("batch_size");
    model.config.max_epochs = tc.at("max_epochs");
    model.config.patience = tc.at("patience");
    model.config.seed = tc.at("seed");
    if (!j.at("normalizer").is_null()) {
      model.normalizer = Normalizer(j["normalizer"].at("mean").get<std::vector<double>>(),
                                    j["normalizer"].at("stddev").get<std::vector<double>>());
    }
    for (const auto& h : j.at("history"))
      model.history.push_back({h.at("epoch"), h.at("train_loss"), h.at("tune_loss"), h.at("tune_f_score")});
    model.selected_epoch = j.at("selected_epoch");
    if (!j.at("fold").is_null()) model.fold = j["fold"].get<std::size_t>();
    model.training_coils = j.at("training_coils").get<std::vector<std::string>>();
    return model;
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace coilwatch

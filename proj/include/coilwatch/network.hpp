#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "coilwatch/autograd.hpp"
#include "coilwatch/optim.hpp"
#include "coilwatch/preprocessing.hpp"

namespace coilwatch {

struct DenseLayer {
  std::size_t units = 0;
};
struct ConvLayer {
  std::size_t filters = 0;
  Padding padding = Padding::same;
};
struct PoolLayer {
  PoolKind kind = PoolKind::max;
};
struct FlattenLayer {};
struct BatchNormLayer {};
struct DropoutLayer {
  double rate = 0.0;
};
enum class Activation { relu, softmax };
struct ActivationLayer {
  Activation kind = Activation::relu;
};

using LayerSpec =
    std::variant<DenseLayer, ConvLayer, PoolLayer, FlattenLayer, BatchNormLayer, DropoutLayer, ActivationLayer>;

std::string describe(const LayerSpec& layer);

/// Ordered layer list plus the per-sample input shape. The last two layers
/// are always dense(2) and softmax (normal, broken).
struct NetworkSpec {
  std::string name;
  Shape input_shape;
  std::vector<LayerSpec> layers;

  /// Per-sample output shape after each layer. Throws ContractViolation when
  /// the chain is inconsistent or the two-class softmax head is missing.
  std::vector<Shape> layer_shapes() const;
  void validate() const { (void)layer_shapes(); }
  /// Width right after the flatten layer; 0 if there is none.
  std::size_t flatten_width() const;
  std::size_t parameterized_layer_count() const;
};

/// Four blocks of dense -> batchnorm -> dropout -> relu, then dense(2) -> softmax.
NetworkSpec build_fcn(std::span<const std::size_t> hidden_sizes, double dropout_rate,
                      std::size_t input_width = 4);

enum class CnnVariant { cnn1, cnn2, cnn3, cnn4 };
inline constexpr CnnVariant kAllCnnVariants[] = {CnnVariant::cnn1, CnnVariant::cnn2, CnnVariant::cnn3,
                                                 CnnVariant::cnn4};
std::string_view to_string(CnnVariant variant);
CnnVariant parse_cnn_variant(std::string_view text);

/// Networks over one 1x20x20 noise covariance matrix.
///   cnn1  conv(6) relu, avgpool, conv(16) relu, avgpool, flatten(400), dense(64) relu, head
///   cnn2  conv(16) relu x2, maxpool, conv(32) relu x2, maxpool, flatten(800), dense(64) relu, head
///   cnn4  valid conv(16) relu, maxpool, valid conv(32) relu, maxpool, flatten(288), dense(64) relu, head
///   cnn3  cnn4 with dropout after both pools and after dense(64)
NetworkSpec build_cnn(CnnVariant variant, double cnn3_dropout = 0.3);

/// Flatten width of a variant over a side x side input, from the layer
/// arithmetic above (same conv keeps the side, valid conv removes 2, pool halves).
constexpr std::size_t cnn_flatten_width(CnnVariant variant, std::size_t side = 20) {
  switch (variant) {
    case CnnVariant::cnn1:
      return 16 * (side / 4) * (side / 4);
    case CnnVariant::cnn2:
      return 32 * (side / 4) * (side / 4);
    case CnnVariant::cnn3:
    case CnnVariant::cnn4: {
      const std::size_t s = ((side - 2) / 2 - 2) / 2;
      return 32 * s * s;
    }
  }
  return 0;
}
static_assert(cnn_flatten_width(CnnVariant::cnn1) == 400);
static_assert(cnn_flatten_width(CnnVariant::cnn2) == 800);
static_assert(cnn_flatten_width(CnnVariant::cnn3) == 288);
static_assert(cnn_flatten_width(CnnVariant::cnn4) == 288);

/// Parameters and batch-norm state for a NetworkSpec.
class Network {
 public:
  Network() = default;
  /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero,
  /// batch-norm scale 1 and shift 0.
  Network(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<BatchNormState>& batchnorm_states() noexcept { return bn_; }
  const std::vector<BatchNormState>& batchnorm_states() const noexcept { return bn_; }

  /// Logits [N×2] for a batch [N × input_shape]. Train mode updates
  /// batch-norm running statistics and draws dropout masks from `rng`.
  Var forward_logits(Tape& tape, const Tensor& batch, Mode mode, std::mt19937_64& rng);
  /// Softmax probabilities [N×2] in infer mode. Does not modify the network.
  Tensor predict(const Tensor& batch) const;

  friend bool operator==(const Network& a, const Network& b);

 private:
  NetworkSpec spec_;
  std::vector<Parameter> params_;
  std::vector<BatchNormState> bn_;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Samples stacked along a leading axis plus their labels.
struct LabeledSet {
  Tensor inputs;
  std::vector<Label> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double tune_loss = 0.0;
  double tune_f_score = 0.0;
};

struct TrainedModel {
  Network network;
  TrainConfig config;
  /// Applied to raw inputs by predict_proba.
  std::optional<Normalizer> normalizer;
  std::vector<EpochRecord> history;
  /// Epoch whose parameters were kept (0 = initial parameters).
  std::size_t selected_epoch = 0;
  /// CV fold the model belongs to and the coils it was fitted on; used as a
  /// leak guard when the model is applied to held-out coils.
  std::optional<std::size_t> fold;
  std::vector<std::string> training_coils;
};

/// Mini-batch training on softmax cross-entropy. After every epoch the tune
/// set is scored; the returned parameters are those of the epoch with the
/// best tune F-score of the broken class (ties: lower tune loss, then
/// earlier epoch). Stops after `patience` epochs without improvement.
TrainedModel train(const NetworkSpec& spec, const LabeledSet& train_set, const LabeledSet& tune_set,
                   const TrainConfig& config);

/// Probability of class broken for one raw sample (normalizer applied).
double predict_proba(const TrainedModel& model, const Tensor& sample);
/// Same for a batch [N × input_shape].
std::vector<double> predict_proba_batch(const TrainedModel& model, const Tensor& batch);

/// Structured-text checkpoint; reload reproduces predictions bit for bit.
void save_model(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

}  // namespace coilwatch

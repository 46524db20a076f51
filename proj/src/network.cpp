#include "coilwatch/network.hpp"

#include <cmath>
#include <sstream>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

std::string describe(const LayerSpec& layer) {
  return std::visit(
      Overloaded{
          [](const DenseLayer& l) { return "dense(" + std::to_string(l.units) + ")"; },
          [](const ConvLayer& l) {
            return "conv(" + std::to_string(l.filters) + (l.padding == Padding::same ? ",same)" : ",valid)");
          },
          [](const PoolLayer& l) { return std::string(l.kind == PoolKind::max ? "maxpool(2,2)" : "avgpool(2,2)"); },
          [](const FlattenLayer&) { return std::string("flatten"); },
          [](const BatchNormLayer&) { return std::string("batchnorm"); },
          [](const DropoutLayer& l) {
            std::ostringstream s;
            s << "dropout(" << l.rate << ")";
            return s.str();
          },
          [](const ActivationLayer& l) { return std::string(l.kind == Activation::relu ? "relu" : "softmax"); },
      },
      layer);
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  auto fail = [&](std::size_t i, const std::string& why) {
    throw ContractViolation("network '" + name + "' layer " + std::to_string(i) + " (" + describe(layers[i]) +
                            "): " + why);
  };
  if (input_shape.empty()) throw ContractViolation("network '" + name + "': empty input shape");
  for (std::size_t d : input_shape)
    if (d == 0) throw ContractViolation("network '" + name + "': input dimensions must be positive");
  if (layers.size() < 2) throw ContractViolation("network '" + name + "': needs at least a dense(2) + softmax head");

  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool last = i + 1 == layers.size();
    std::visit(Overloaded{
                   [&](const DenseLayer& l) {
                     if (l.units == 0) fail(i, "units must be positive");
                     if (cur.size() != 1) fail(i, "expects a flat input, got " + to_string(cur));
                     cur = {l.units};
                   },
                   [&](const ConvLayer& l) {
                     if (l.filters == 0) fail(i, "filter count must be positive");
                     if (cur.size() != 3) fail(i, "expects [C×H×W], got " + to_string(cur));
                     if (l.padding == Padding::valid) {
                       if (cur[1] < 3 || cur[2] < 3) fail(i, "input " + to_string(cur) + " smaller than 3×3 kernel");
                       cur = {l.filters, cur[1] - 2, cur[2] - 2};
                     } else {
                       cur = {l.filters, cur[1], cur[2]};
                     }
                   },
                   [&](const PoolLayer&) {
                     if (cur.size() != 3) fail(i, "expects [C×H×W], got " + to_string(cur));
                     if (cur[1] < 2 || cur[2] < 2) fail(i, "input " + to_string(cur) + " smaller than 2×2 window");
                     cur = {cur[0], cur[1] / 2, cur[2] / 2};
                   },
                   [&](const FlattenLayer&) { cur = {element_count(cur)}; },
                   [&](const BatchNormLayer&) {
                     if (cur.size() != 1) fail(i, "expects a flat input, got " + to_string(cur));
                   },
                   [&](const DropoutLayer& l) {
                     if (!(l.rate >= 0.0 && l.rate < 1.0)) fail(i, "rate must lie in [0, 1)");
                   },
                   [&](const ActivationLayer& l) {
                     if (l.kind == Activation::softmax && !last) fail(i, "softmax is only allowed as the final layer");
                   },
               },
               layers[i]);
    shapes.push_back(cur);
  }
  const auto* head = std::get_if<DenseLayer>(&layers[layers.size() - 2]);
  const auto* act = std::get_if<ActivationLayer>(&layers.back());
  if (head == nullptr || head->units != 2 || act == nullptr || act->kind != Activation::softmax) {
    throw ContractViolation("network '" + name + "': final layers must be dense(2) followed by softmax");
  }
  return shapes;
}

std::size_t NetworkSpec::flatten_width() const {
  const auto shapes = layer_shapes();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (std::holds_alternative<FlattenLayer>(layers[i])) return shapes[i][0];
  return 0;
}

std::size_t NetworkSpec::parameterized_layer_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (std::holds_alternative<DenseLayer>(l) || std::holds_alternative<ConvLayer>(l) ||
        std::holds_alternative<BatchNormLayer>(l))
      ++n;
  return n;
}

NetworkSpec build_fcn(std::span<const std::size_t> hidden_sizes, double dropout_rate, std::size_t input_width) {
  if (hidden_sizes.size() != 4) {
    throw ContractViolation("build_fcn: expected 4 hidden sizes, got " + std::to_string(hidden_sizes.size()));
  }
  for (std::size_t s : hidden_sizes)
    if (s == 0) throw ContractViolation("build_fcn: hidden sizes must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ContractViolation("build_fcn: dropout rate must lie in [0, 1)");
  NetworkSpec spec;
  spec.name = "fcn";
  spec.input_shape = {input_width};
  for (std::size_t units : hidden_sizes) {
    spec.layers.push_back(DenseLayer{units});
    spec.layers.push_back(BatchNormLayer{});
    spec.layers.push_back(DropoutLayer{dropout_rate});
    spec.layers.push_back(ActivationLayer{Activation::relu});
  }
  spec.layers.push_back(DenseLayer{2});
  spec.layers.push_back(ActivationLayer{Activation::softmax});
  spec.validate();
  return spec;
}

std::string_view to_string(CnnVariant variant) {
  switch (variant) {
    case CnnVariant::cnn1: return "cnn1";
    case CnnVariant::cnn2: return "cnn2";
    case CnnVariant::cnn3: return "cnn3";
    case CnnVariant::cnn4: return "cnn4";
  }
  throw ContractViolation("unknown CNN variant");
}

CnnVariant parse_cnn_variant(std::string_view text) {
  for (CnnVariant v : kAllCnnVariants)
    if (to_string(v) == text) return v;
  throw ContractViolation("unknown CNN variant '" + std::string(text) + "' (expected cnn1..cnn4)");
}

NetworkSpec build_cnn(CnnVariant variant, double cnn3_dropout) {
  const ActivationLayer relu{Activation::relu};
  NetworkSpec spec;
  spec.name = std::string(to_string(variant));
  spec.input_shape = {1, kChannelsPerCoil, kChannelsPerCoil};
  auto& L = spec.layers;
  switch (variant) {
    case CnnVariant::cnn1:
      L = {ConvLayer{6, Padding::same}, relu, PoolLayer{PoolKind::average},
           ConvLayer{16, Padding::same}, relu, PoolLayer{PoolKind::average},
           FlattenLayer{}, DenseLayer{64}, relu};
      break;
    case CnnVariant::cnn2:
      L = {ConvLayer{16, Padding::same}, relu, ConvLayer{16, Padding::same}, relu, PoolLayer{PoolKind::max},
           ConvLayer{32, Padding::same}, relu, ConvLayer{32, Padding::same}, relu, PoolLayer{PoolKind::max},
           FlattenLayer{}, DenseLayer{64}, relu};
      break;
    case CnnVariant::cnn4:
      L = {ConvLayer{16, Padding::valid}, relu, PoolLayer{PoolKind::max},
           ConvLayer{32, Padding::valid}, relu, PoolLayer{PoolKind::max},
           FlattenLayer{}, DenseLayer{64}, relu};
      break;
    case CnnVariant::cnn3:
      if (!(cnn3_dropout >= 0.0 && cnn3_dropout < 1.0)) throw ContractViolation("build_cnn: dropout rate must lie in [0, 1)");
      L = {ConvLayer{16, Padding::valid}, relu, PoolLayer{PoolKind::max}, DropoutLayer{cnn3_dropout},
           ConvLayer{32, Padding::valid}, relu, PoolLayer{PoolKind::max}, DropoutLayer{cnn3_dropout},
           FlattenLayer{}, DenseLayer{64}, relu, DropoutLayer{cnn3_dropout}};
      break;
  }
  L.push_back(DenseLayer{2});
  L.push_back(ActivationLayer{Activation::softmax});
  if (spec.flatten_width() != cnn_flatten_width(variant)) {
    throw ContractViolation("build_cnn: " + spec.name + " flattens to " + std::to_string(spec.flatten_width()) +
                            ", expected " + std::to_string(cnn_flatten_width(variant)));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Network

namespace {

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, -limit, limit);
  return t;
}

// Shared forward pass; `params` are tape handles in Network parameter order.
Var run_layers(const NetworkSpec& spec, Tape& tape, const Tensor& batch, Mode mode, std::mt19937_64& rng,
               std::span<const Var> params, std::vector<BatchNormState>& bn) {
  Shape expected{batch.shape().empty() ? 0 : batch.dim(0)};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (batch.shape() != expected) {
    throw DimensionError("network '" + spec.name + "': input " + to_string(batch.shape()) + " does not match [N×" +
                         to_string(spec.input_shape).substr(1));
  }
  Var x = tape.input(batch);
  std::size_t p = 0, b = 0;
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const DenseLayer&) {
                     x = add_bias(matmul(x, params[p]), params[p + 1]);
                     p += 2;
                   },
                   [&](const ConvLayer& l) {
                     x = add_bias(conv2d(x, params[p], l.padding), params[p + 1]);
                     p += 2;
                   },
                   [&](const PoolLayer& l) { x = pool2d(x, l.kind); },
                   [&](const FlattenLayer&) { x = flatten(x); },
                   [&](const BatchNormLayer&) {
                     x = batchnorm(x, params[p], params[p + 1], bn[b], mode);
                     p += 2;
                     ++b;
                   },
                   [&](const DropoutLayer& l) { x = dropout(x, l.rate, mode, rng); },
                   [&](const ActivationLayer& l) {
                     if (l.kind == Activation::relu) x = relu(x);
                   },
               },
               spec.layers[i]);
  }
  return x;
}

}  // namespace

Network::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  const auto shapes = spec_.layer_shapes();
  std::mt19937_64 rng(seed);
  Shape in = spec_.input_shape;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    if (const auto* d = std::get_if<DenseLayer>(&spec_.layers[i])) {
      params_.emplace_back(prefix + ".weight", glorot_uniform({in[0], d->units}, in[0], d->units, rng));
      params_.emplace_back(prefix + ".bias", Tensor({d->units}, 0.0));
    } else if (const auto* c = std::get_if<ConvLayer>(&spec_.layers[i])) {
      params_.emplace_back(prefix + ".kernel",
                           glorot_uniform({c->filters, in[0], 3, 3}, in[0] * 9, c->filters * 9, rng));
      params_.emplace_back(prefix + ".bias", Tensor({c->filters}, 0.0));
    } else if (std::holds_alternative<BatchNormLayer>(spec_.layers[i])) {
      params_.emplace_back(prefix + ".scale", Tensor({in[0]}, 1.0));
      params_.emplace_back(prefix + ".shift", Tensor({in[0]}, 0.0));
      bn_.emplace_back(in[0]);
    }
    in = shapes[i];
  }
}

Var Network::forward_logits(Tape& tape, const Tensor& batch, Mode mode, std::mt19937_64& rng) {
  std::vector<Var> handles;
  handles.reserve(params_.size());
  for (Parameter& p : params_) handles.push_back(tape.param(p));
  return run_layers(spec_, tape, batch, mode, rng, handles, bn_);
}

Tensor Network::predict(const Tensor& batch) const {
  Tape tape;
  std::vector<Var> handles;
  handles.reserve(params_.size());
  for (const Parameter& p : params_) handles.push_back(tape.input(p.value));
  std::vector<BatchNormState> bn = bn_;
  std::mt19937_64 unused(0);
  Var logits = run_layers(spec_, tape, batch, Mode::infer, unused, handles, bn);
  return kernels::softmax_rows(logits.value());
}

bool operator==(const Network& a, const Network& b) {
  if (a.params_.size() != b.params_.size() || a.bn_.size() != b.bn_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i)
    if (a.params_[i].name != b.params_[i].name || a.params_[i].value != b.params_[i].value) return false;
  for (std::size_t i = 0; i < a.bn_.size(); ++i)
    if (a.bn_[i].running_mean != b.bn_[i].running_mean || a.bn_[i].running_var != b.bn_[i].running_var) return false;
  return true;
}

}  // namespace coilwatch

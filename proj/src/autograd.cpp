#include "coilwatch/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Core>

#include "coilwatch/error.hpp"
#include "coilwatch/random.hpp"

namespace coilwatch {

Parameter::Parameter(std::string name, Tensor value)
    : name(std::move(name)), value(std::move(value)), grad(this->value.shape(), 0.0) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape(), 0.0);
  } else {
    grad.fill(0.0);
  }
}

BatchNormState::BatchNormState(std::size_t features)
    : running_mean({features}, 0.0), running_var({features}, 1.0) {}

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::input(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Node node;
  node.value = p.value;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractViolation("operand recorded on a different tape");
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_of(Var v) {
  Node& node = nodes_.at(v.id());
  if (node.grad.shape() != node.value.shape()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ContractViolation("backward root belongs to a different tape");
  if (root.value().size() != 1) {
    throw DimensionError("backward needs a single-element root, got " + to_string(root.shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor();
  replay_order_.clear();
  grad_of(root).fill(1.0);
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty()) continue;
    replay_order_.push_back(id);
    if (node.backward) node.backward(*this, node.grad);
    if (node.param != nullptr) {
      Tensor& target = node.param->grad;
      if (target.shape() != node.value.shape()) target = Tensor(node.value.shape(), 0.0);
      for (std::size_t i = 0; i < target.size(); ++i) target[i] += node.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMatrix> rows_view(double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
Eigen::Map<const RowMatrix> rows_view(const double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

}  // namespace

namespace kernels {

void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
          bool accumulate) {
  const auto A = rows_view(a, m, k);
  const auto B = rows_view(b, k, n);
  auto C = rows_view(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.raw() + r * cols;
    double* o = out.raw() + r * cols;
    const double top = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - top);
      total += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  return out;
}

}  // namespace kernels

namespace {

void add_into(Tensor& target, const Tensor& source) {
  double* t = target.raw();
  const double* s = source.raw();
  for (std::size_t i = 0; i < target.size(); ++i) t[i] += s[i];
}



// Spatial geometry of a rank-3 or rank-4 image tensor.
struct ImageDims {
  std::size_t batch, channels, height, width;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw DimensionError(std::string(op) + " expects [C×H×W] or [N×C×H×W], got " + to_string(s));
}

Shape image_shape(const Shape& like, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (like.size() == 3) return {c, h, w};
  return {n, c, h, w};
}

// im2col for one sample: cols[(ci*9 + ky*3 + kx) × (oy*wo + ox)].
void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t pad,
            std::size_t ho, std::size_t wo, double* cols) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols + ((c * 3 + ky) * 3 + kx) * plane;
        // Output columns whose input column ox + kx - pad lies inside [0, w).
        const std::size_t lo = kx < pad ? pad - kx : 0;
        const std::size_t hi = std::min(wo, w + pad - kx);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          double* out = row + oy * wo;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          std::fill(out, out + lo, 0.0);
          std::copy(x + (c * h + iy) * w + lo + kx - pad, x + (c * h + iy) * w + hi + kx - pad, out + lo);
          std::fill(out + hi, out + wo, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t pad,
                std::size_t ho, std::size_t wo, double* dx) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((c * 3 + ky) * 3 + kx) * plane;
        const std::size_t lo = kx < pad ? pad - kx : 0;
        const std::size_t hi = std::min(wo, w + pad - kx);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* target = dx + (c * h + iy) * w + kx - pad;
          const double* src = row + oy * wo;
          for (std::size_t ox = lo; ox < hi; ++ox) target[ox] += src[ox];
        }
      }
    }
  }
}

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes, const char* op) {
  if (labels.size() != batch) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ContractViolation(std::string(op) + ": label " + std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

constexpr double kProbFloor = 1e-12;

}  // namespace

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw DimensionError("matmul: cannot multiply " + to_string(sa) + " by " + to_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  kernels::gemm(m, k, n, a.value().raw(), b.value().raw(), out.raw());
  Tape& tape = *a.tape();
  const Var parents[] = {a, b};
  return tape.record(std::move(out), parents, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const auto G = rows_view(g.raw(), m, n);
    if (t.requires_grad(a))
      rows_view(t.grad_of(a).raw(), m, k).noalias() += G * rows_view(b.value().raw(), k, n).transpose();
    if (t.requires_grad(b))
      rows_view(t.grad_of(b).raw(), k, n).noalias() += rows_view(a.value().raw(), m, k).transpose() * G;
  });
}

Var add_bias(Var x, Var bias) {
  const Shape& sx = x.shape();
  const Shape& sb = bias.shape();
  if (sx.size() < 2 || sb.size() != 1 || sb[0] != sx[1]) {
    throw DimensionError("add_bias: bias " + to_string(sb) + " does not match axis 1 of " + to_string(sx));
  }
  const std::size_t batch = sx[0], channels = sx[1];
  const std::size_t inner = x.value().size() / (batch * channels);
  Tensor out = x.value();
  const double* bv = bias.value().raw();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.raw() + (n * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  const Var parents[] = {x, bias};
  return x.tape()->record(std::move(out), parents, [x, bias, batch, channels, inner](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) add_into(t.grad_of(x), g);
    if (t.requires_grad(bias)) {
      double* gb = t.grad_of(bias).raw();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
          const double* p = g.raw() + (n * channels + c) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          gb[c] += acc;
        }
    }
  });
}

Var conv2d(Var x, Var kernels, Padding padding) {
  const ImageDims d = image_dims(x.shape(), "conv2d");
  const Shape& sk = kernels.shape();
  if (sk.size() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != d.channels) {
    throw DimensionError("conv2d: kernels " + to_string(sk) + " do not fit input " + to_string(x.shape()) +
                         " (expected [Co×" + std::to_string(d.channels) + "×3×3])");
  }
  const std::size_t pad = padding == Padding::same ? 1 : 0;
  if (padding == Padding::valid && (d.height < 3 || d.width < 3)) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " smaller than 3×3 kernel under valid padding");
  }
  const std::size_t out_c = sk[0];
  const std::size_t ho = d.height + 2 * pad - 2, wo = d.width + 2 * pad - 2;
  const std::size_t patch = d.channels * 9, plane = ho * wo;
  const std::size_t in_sample = d.channels * d.height * d.width, out_sample = out_c * plane;

  Tensor out(image_shape(x.shape(), d.batch, out_c, ho, wo));
  std::vector<double> cols(patch * plane);
  const auto K = rows_view(kernels.value().raw(), out_c, patch);
  const auto C = rows_view(cols.data(), patch, plane);
  for (std::size_t n = 0; n < d.batch; ++n) {
    im2col(x.value().raw() + n * in_sample, d.channels, d.height, d.width, pad, ho, wo, cols.data());
    rows_view(out.raw() + n * out_sample, out_c, plane).noalias() = K * C;
  }
  Tape& tape = *x.tape();
  const Var parents[] = {x, kernels};
  // The patch matrix is rebuilt per sample during backward instead of being
  // kept for the whole batch.
  return tape.record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
    const bool want_k = t.requires_grad(kernels), want_x = t.requires_grad(x);
    std::vector<double> cols(patch * plane), dcols(want_x ? patch * plane : 0);
    const auto K = rows_view(kernels.value().raw(), out_c, patch);
    const auto C = rows_view(cols.data(), patch, plane);
    double* gk = want_k ? t.grad_of(kernels).raw() : nullptr;
    double* gx = want_x ? t.grad_of(x).raw() : nullptr;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const auto G = rows_view(g.raw() + n * out_sample, out_c, plane);
      if (want_k) {
        im2col(x.value().raw() + n * in_sample, d.channels, d.height, d.width, pad, ho, wo, cols.data());
        rows_view(gk, out_c, patch).noalias() += G * C.transpose();
      }
      if (want_x) {
        rows_view(dcols.data(), patch, plane).noalias() = K.transpose() * G;
        col2im_add(dcols.data(), d.channels, d.height, d.width, pad, ho, wo, gx + n * in_sample);
      }
    }
  });
}

Var pool2d(Var x, PoolKind kind) {
  const ImageDims d = image_dims(x.shape(), "pool2d");
  const std::size_t ho = d.height / 2, wo = d.width / 2;
  if (ho == 0 || wo == 0) {
    throw DimensionError("pool2d: input " + to_string(x.shape()) + " too small for a 2×2 window");
  }
  const std::size_t planes = d.batch * d.channels;
  Tensor out(image_shape(x.shape(), d.batch, d.channels, ho, wo));
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == PoolKind::max) argmax->resize(out.size());
  const double* in = x.value().raw();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t o = (p * ho + oy) * wo + ox;
        const std::size_t base = (p * d.height + 2 * oy) * d.width + 2 * ox;
        const std::size_t idx[4] = {base, base + 1, base + d.width, base + d.width + 1};
        if (kind == PoolKind::max) {
          std::size_t best = idx[0];
          for (std::size_t i = 1; i < 4; ++i)
            if (in[idx[i]] > in[best]) best = idx[i];
          out[o] = in[best];
          (*argmax)[o] = best;
        } else {
          out[o] = 0.25 * (in[idx[0]] + in[idx[1]] + in[idx[2]] + in[idx[3]]);
        }
      }
    }
  }
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
    double* gx = t.grad_of(x).raw();
    if (kind == PoolKind::max) {
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
      return;
    }
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double share = 0.25 * g[(p * ho + oy) * wo + ox];
          const std::size_t base = (p * d.height + 2 * oy) * d.width + 2 * ox;
          gx[base] += share;
          gx[base + 1] += share;
          gx[base + d.width] += share;
          gx[base + d.width + 1] += share;
        }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [x](Tape& t, const Tensor& g) {
    const double* in = x.value().raw();
    double* gx = t.grad_of(x).raw();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in[i] > 0.0) gx[i] += g[i];
  });
}

Var softmax(Var x) {
  if (x.shape().size() != 1 && x.shape().size() != 2) {
    throw DimensionError("softmax expects rank 1 or 2, got " + to_string(x.shape()));
  }
  auto y = std::make_shared<Tensor>(kernels::softmax_rows(x.value()));
  const std::size_t cols = x.shape().back();
  const Var parents[] = {x};
  return x.tape()->record(*y, parents, [x, y, cols](Tape& t, const Tensor& g) {
    double* gx = t.grad_of(x).raw();
    const std::size_t rows = y->size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y->raw() + r * cols;
      const double* gr = g.raw() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("flatten expects a leading batch axis, got " + to_string(s));
  Tensor out = x.value().reshaped({s[0], x.value().size() / s[0]});
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [x](Tape& t, const Tensor& g) {
    double* gx = t.grad_of(x).raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var batchnorm(Var x, Var scale, Var shift, BatchNormState& state, Mode mode) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("batchnorm expects [N×F], got " + to_string(s));
  const std::size_t batch = s[0], features = s[1];
  const Shape feature_shape{features};
  if (scale.shape() != feature_shape || shift.shape() != feature_shape ||
      state.running_mean.shape() != feature_shape || state.running_var.shape() != feature_shape) {
    throw DimensionError("batchnorm: parameters " + to_string(scale.shape()) + "/" + to_string(shift.shape()) +
                         " do not match input " + to_string(s));
  }
  if (mode == Mode::train && batch < 2) {
    throw ContractViolation("batchnorm: train mode needs a batch of at least 2, got 1");
  }
  const double* in = x.value().raw();
  const double* gamma = scale.value().raw();
  const double* beta = shift.value().raw();

  auto inv_std = std::make_shared<std::vector<double>>(features);
  auto xhat = std::make_shared<Tensor>(s);
  if (mode == Mode::train) {
    for (std::size_t f = 0; f < features; ++f) {
      double mean = 0.0;
      for (std::size_t n = 0; n < batch; ++n) mean += in[n * features + f];
      mean /= static_cast<double>(batch);
      double var = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double dv = in[n * features + f] - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(batch);
      (*inv_std)[f] = 1.0 / std::sqrt(var + BatchNormState::kEpsilon);
      for (std::size_t n = 0; n < batch; ++n) (*xhat)[n * features + f] = (in[n * features + f] - mean) * (*inv_std)[f];
      state.running_mean[f] = BatchNormState::kMomentum * state.running_mean[f] + (1.0 - BatchNormState::kMomentum) * mean;
      state.running_var[f] = BatchNormState::kMomentum * state.running_var[f] + (1.0 - BatchNormState::kMomentum) * var;
    }
  } else {
    for (std::size_t f = 0; f < features; ++f) {
      (*inv_std)[f] = 1.0 / std::sqrt(state.running_var[f] + BatchNormState::kEpsilon);
      for (std::size_t n = 0; n < batch; ++n)
        (*xhat)[n * features + f] = (in[n * features + f] - state.running_mean[f]) * (*inv_std)[f];
    }
  }
  Tensor out(s);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t f = 0; f < features; ++f)
      out[n * features + f] = gamma[f] * (*xhat)[n * features + f] + beta[f];

  const Var parents[] = {x, scale, shift};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
    const double* gm = scale.value().raw();
    if (t.requires_grad(scale) || t.requires_grad(shift)) {
      std::vector<double> dgamma(features, 0.0), dbeta(features, 0.0);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t f = 0; f < features; ++f) {
          dgamma[f] += g[n * features + f] * (*xhat)[n * features + f];
          dbeta[f] += g[n * features + f];
        }
      if (t.requires_grad(scale)) {
        double* p = t.grad_of(scale).raw();
        for (std::size_t f = 0; f < features; ++f) p[f] += dgamma[f];
      }
      if (t.requires_grad(shift)) {
        double* p = t.grad_of(shift).raw();
        for (std::size_t f = 0; f < features; ++f) p[f] += dbeta[f];
      }
    }
    if (!t.requires_grad(x)) return;
    double* gx = t.grad_of(x).raw();
    if (mode == Mode::infer) {
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t f = 0; f < features; ++f) gx[n * features + f] += g[n * features + f] * gm[f] * (*inv_std)[f];
      return;
    }
    const double count = static_cast<double>(batch);
    for (std::size_t f = 0; f < features; ++f) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double dxhat = g[n * features + f] * gm[f];
        sum_d += dxhat;
        sum_dx += dxhat * (*xhat)[n * features + f];
      }
      for (std::size_t n = 0; n < batch; ++n) {
        const double dxhat = g[n * features + f] * gm[f];
        gx[n * features + f] +=
            (*inv_std)[f] / count * (count * dxhat - sum_d - (*xhat)[n * features + f] * sum_dx);
      }
    }
  });
}

Var dropout(Var x, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractViolation("dropout rate must lie in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) {
    const Var parents[] = {x};
    return x.tape()->record(x.value(), parents, [x](Tape& t, const Tensor& g) { add_into(t.grad_of(x), g); });
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < rate ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [x, mask](Tape& t, const Tensor& g) {
    double* gx = t.grad_of(x).raw();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Var cross_entropy(Var probs, std::span<const int> labels) {
  const Shape& s = probs.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy expects [N×K] probabilities, got " + to_string(s));
  const std::size_t batch = s[0], classes = s[1];
  check_labels(labels, batch, classes, "cross_entropy");
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) loss -= std::log(std::max(probs.value()[n * classes + lab[n]], kProbFloor));
  loss /= static_cast<double>(batch);
  const Var parents[] = {probs};
  return probs.tape()->record(Tensor({1}, loss), parents, [=](Tape& t, const Tensor& g) {
    double* gp = t.grad_of(probs).raw();
    for (std::size_t n = 0; n < batch; ++n) {
      const double p = probs.value()[n * classes + lab[n]];
      if (p >= kProbFloor) gp[n * classes + lab[n]] -= g[0] / (p * static_cast<double>(batch));
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("softmax_cross_entropy expects [N×K] logits, got " + to_string(s));
  const std::size_t batch = s[0], classes = s[1];
  check_labels(labels, batch, classes, "softmax_cross_entropy");
  auto probs = std::make_shared<Tensor>(kernels::softmax_rows(logits.value()));
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) loss -= std::log(std::max((*probs)[n * classes + lab[n]], kProbFloor));
  loss /= static_cast<double>(batch);
  const Var parents[] = {logits};
  return logits.tape()->record(Tensor({1}, loss), parents, [=](Tape& t, const Tensor& g) {
    double* gl = t.grad_of(logits).raw();
    const double scale = g[0] / static_cast<double>(batch);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < classes; ++c) {
        const double target = static_cast<int>(c) == lab[n] ? 1.0 : 0.0;
        gl[n * classes + c] += scale * ((*probs)[n * classes + c] - target);
      }
  });
}

Var sum(Var x) {
  const Var parents[] = {x};
  return x.tape()->record(Tensor({1}, x.value().sum()), parents, [x](Tape& t, const Tensor& g) {
    double* gx = t.grad_of(x).raw();
    for (std::size_t i = 0; i < x.value().size(); ++i) gx[i] += g[0];
  });
}

}  // namespace coilwatch

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "coilwatch/autograd.hpp"
#include "coilwatch/error.hpp"
#include "coilwatch/optim.hpp"
#include "gradcheck.hpp"

namespace coilwatch {
namespace {

using testing::check_gradients;
using testing::random_tensor;

constexpr double kGradTol = 1e-4;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}), DimensionError);
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(m.shape(), (Shape{2, 2}));
  EXPECT_EQ(m.at(1, 0), 3.0);
}

TEST(Matmul, IdentityAndDot) {
  Tape tape;
  const Var id = tape.input(Tensor::matrix({{1, 0}, {0, 1}}));
  const Var b = tape.input(Tensor::matrix({{3, 4}, {5, 6}}));
  EXPECT_EQ(matmul(id, b).value(), Tensor::matrix({{3, 4}, {5, 6}}));
  const Var row = tape.input(Tensor::matrix({{1, 2}}));
  const Var col = tape.input(Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(matmul(row, col).value()[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  const Var a = tape.input(Tensor({2, 3}));
  const Var b = tape.input(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] by [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, SumGradientIsColumnSumsOfB) {
  std::mt19937_64 rng(3);
  Tape tape;
  const Var a = tape.input(random_tensor({4, 3}, rng), true);
  const Tensor bv = random_tensor({3, 2}, rng);
  const Var b = tape.input(bv);
  tape.backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.grad().at(i, k), bv.at(k, 0) + bv.at(k, 1), 1e-12);
  std::mt19937_64 check_rng(4);
  const auto r = check_gradients([](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                                 {random_tensor({4, 3}, check_rng), random_tensor({3, 2}, check_rng)}, check_rng);
  EXPECT_LT(r.worst_error, kGradTol);
}

TEST(Conv2d, ZeroKernelAndShapes) {
  std::mt19937_64 rng(5);
  Tape tape;
  const Var x = tape.input(random_tensor({1, 20, 20}, rng));
  const Var zero = tape.input(Tensor({1, 1, 3, 3}));
  const Var same = conv2d(x, zero, Padding::same);
  EXPECT_EQ(same.shape(), (Shape{1, 20, 20}));
  EXPECT_EQ(same.value(), Tensor({1, 20, 20}));
  EXPECT_EQ(conv2d(x, zero, Padding::valid).shape(), (Shape{1, 18, 18}));
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Tensor ramp({1, 5, 5});
  std::iota(ramp.data().begin(), ramp.data().end(), 0.0);
  Tensor delta({1, 1, 3, 3});
  delta[4] = 1.0;
  Tape tape;
  EXPECT_EQ(conv2d(tape.input(ramp), tape.input(delta), Padding::same).value(), ramp);
}

TEST(Conv2d, CrossCorrelationConvention) {
  // Kernel with a single 1 in the top-left tap reads the up-left neighbour.
  Tensor x({1, 3, 3});
  std::iota(x.data().begin(), x.data().end(), 1.0);
  Tensor k({1, 1, 3, 3});
  k[0] = 1.0;
  Tape tape;
  const Tensor out = conv2d(tape.input(x), tape.input(k), Padding::same).value();
  EXPECT_EQ(out[4], 1.0);  // centre sees x(0,0)
  EXPECT_EQ(out[0], 0.0);  // padding
}

TEST(Conv2d, SpatialShapeRules) {
  std::mt19937_64 rng(6);
  for (std::size_t h : {1, 2, 3, 7}) {
    for (std::size_t w : {1, 4, 5}) {
      Tape tape;
      const Var x = tape.input(random_tensor({2, h, w}, rng));
      const Var k = tape.input(random_tensor({3, 2, 3, 3}, rng));
      EXPECT_EQ(conv2d(x, k, Padding::same).shape(), (Shape{3, h, w}));
      if (h >= 3 && w >= 3) {
        EXPECT_EQ(conv2d(x, k, Padding::valid).shape(), (Shape{3, h - 2, w - 2}));
      } else {
        EXPECT_THROW(conv2d(x, k, Padding::valid), DimensionError);
      }
    }
  }
}

TEST(Pool2d, MaxAndAverage) {
  Tape tape;
  const Var x = tape.input(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(pool2d(x, PoolKind::max).value()[0], 4.0);
  EXPECT_EQ(pool2d(x, PoolKind::average).value()[0], 2.5);
  const Var c = tape.input(Tensor({2, 4, 4}, 7.0));
  EXPECT_EQ(pool2d(c, PoolKind::max).value(), pool2d(c, PoolKind::average).value());
}

TEST(Pool2d, CnnShapeChainAndFloor) {
  Tape tape;
  const Var x = tape.input(Tensor({16, 20, 20}));
  const Var once = pool2d(x, PoolKind::max);
  EXPECT_EQ(once.shape(), (Shape{16, 10, 10}));
  EXPECT_EQ(pool2d(once, PoolKind::max).shape(), (Shape{16, 5, 5}));
  EXPECT_EQ(pool2d(tape.input(Tensor({1, 5, 5})), PoolKind::max).shape(), (Shape{1, 2, 2}));
}

TEST(Pool2d, MaxGradientGoesToFirstArgmax) {
  Tape tape;
  const Var x = tape.input(Tensor({1, 2, 2}, {5, 5, 1, 5}), true);
  tape.backward(sum(pool2d(x, PoolKind::max)));
  EXPECT_EQ(x.grad(), Tensor({1, 2, 2}, {1, 0, 0, 0}));
  Tape tape2;
  const Var y = tape2.input(Tensor({1, 2, 2}, {1, 2, 3, 4}), true);
  tape2.backward(sum(pool2d(y, PoolKind::average)));
  EXPECT_EQ(y.grad(), Tensor({1, 2, 2}, 0.25));
}

TEST(Activations, ReluAndSoftmax) {
  Tape tape;
  EXPECT_EQ(relu(tape.input(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
  const Tensor half = softmax(tape.input(Tensor::vector({0, 0}))).value();
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);
  const Tensor big = softmax(tape.input(Tensor::vector({1000, 1000}))).value();
  EXPECT_TRUE(big.all_finite());
  EXPECT_DOUBLE_EQ(big[0], 0.5);
}

TEST(Activations, SoftmaxSumsToOneAndIsShiftInvariant) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 5}, rng, -30.0, 30.0);
    Tensor shifted = x;
    const double c = uniform(rng, -100.0, 100.0);
    for (double& v : shifted.data()) v += c;
    Tape tape;
    const Tensor p = softmax(tape.input(x)).value();
    const Tensor q = softmax(tape.input(shifted)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GT(p.at(r, j), 0.0);
        EXPECT_NEAR(p.at(r, j), q.at(r, j), 1e-12);
        total += p.at(r, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(BatchNorm, TwoPointNormalization) {
  Tape tape;
  BatchNormState state(1);
  const Var x = tape.input(Tensor::matrix({{1}, {3}}));
  const Var scale = tape.input(Tensor({1}, 1.0));
  const Var shift = tape.input(Tensor({1}, 0.0));
  const Tensor out = batchnorm(x, scale, shift, state, Mode::train).value();
  const double expected = 1.0 / std::sqrt(1.0 + BatchNormState::kEpsilon);
  EXPECT_NEAR(out[0], -expected, 1e-12);
  EXPECT_NEAR(out[1], expected, 1e-12);
  // Running stats moved towards the batch statistics with momentum 0.9.
  EXPECT_NEAR(state.running_mean[0], 0.1 * 2.0, 1e-12);
  EXPECT_NEAR(state.running_var[0], 0.9 + 0.1 * 1.0, 1e-12);
}

TEST(BatchNorm, TrainNeedsTwoRowsAndInferIsDeterministic) {
  Tape tape;
  BatchNormState state(2);
  const Var scale = tape.input(Tensor({2}, 1.0));
  const Var shift = tape.input(Tensor({2}, 0.0));
  EXPECT_THROW(batchnorm(tape.input(Tensor({1, 2})), scale, shift, state, Mode::train), ContractViolation);
  const Var x = tape.input(Tensor::matrix({{0.3, -2}, {1, 4}}));
  const Tensor first = batchnorm(x, scale, shift, state, Mode::infer).value();
  EXPECT_EQ(first, batchnorm(x, scale, shift, state, Mode::infer).value());
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({4, 6}, rng);
  Tape tape;
  const Var v = tape.input(x);
  EXPECT_EQ(dropout(v, 0.0, Mode::train, rng).value(), x);
  EXPECT_EQ(dropout(v, 0.0, Mode::infer, rng).value(), x);
  EXPECT_EQ(dropout(v, 0.7, Mode::infer, rng).value(), x);
  EXPECT_THROW(dropout(v, 1.0, Mode::train, rng), ContractViolation);
}

TEST(Dropout, LawOfLargeNumbers) {
  std::mt19937_64 rng(10);
  const Tensor x({100000}, 3.0);
  Tape tape;
  const Tensor out = dropout(tape.input(x), 0.5, Mode::train, rng).value();
  std::size_t survivors = 0;
  double total = 0.0;
  for (double v : out.data()) {
    if (v != 0.0) {
      ++survivors;
      total += v;
    }
  }
  EXPECT_NEAR(static_cast<double>(survivors) / 1e5, 0.5, 0.01);
  EXPECT_DOUBLE_EQ(total / static_cast<double>(survivors), 6.0);
}

TEST(Dropout, SameSeedSameMask) {
  const Tensor x({50}, 1.0);
  std::mt19937_64 a(11), b(11);
  Tape tape;
  const Tensor first = dropout(tape.input(x), 0.3, Mode::train, a).value();
  EXPECT_EQ(first, dropout(tape.input(x), 0.3, Mode::train, b).value());
}

TEST(CrossEntropy, KnownValues) {
  Tape tape;
  const int zero[] = {0};
  const int one[] = {1};
  EXPECT_LE(cross_entropy(tape.input(Tensor::matrix({{1, 0}})), zero).value()[0], 1e-12);
  EXPECT_NEAR(cross_entropy(tape.input(Tensor::matrix({{0.5, 0.5}})), one).value()[0], std::log(2.0), 1e-12);
  const int bad[] = {2};
  EXPECT_THROW(cross_entropy(tape.input(Tensor::matrix({{0.5, 0.5}})), bad), ContractViolation);
  // p(true) = 0 is clamped rather than infinite.
  EXPECT_NEAR(cross_entropy(tape.input(Tensor::matrix({{1, 0}})), one).value()[0], -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, FusedGradientIsPMinusOneHotOverBatch) {
  std::mt19937_64 rng(12);
  const Tensor logits = random_tensor({3, 2}, rng, -2, 2);
  const int labels[] = {0, 1, 1};
  Tape tape;
  const Var z = tape.input(logits, true);
  tape.backward(softmax_cross_entropy(z, labels));
  const Tensor p = kernels::softmax_rows(logits);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      const double onehot = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
      EXPECT_NEAR(z.grad().at(r, c), (p.at(r, c) - onehot) / 3.0, 1e-12);
    }
}

TEST(Tape, ReplaysInReverseOrderAndAccumulates) {
  Tape tape;
  Parameter w("w", Tensor::vector({2.0}));
  const Var p = tape.param(w);
  const Var a = relu(p);
  const Var b = relu(p);
  const Var total = sum(flatten(tape.input(Tensor({1, 1}))));
  (void)total;
  const Var two[] = {a, b};
  const Var joined = tape.record(Tensor({1}, {a.value()[0] + b.value()[0]}), two, [a, b](Tape& t, const Tensor& g) {
    t.grad_of(a)[0] += g[0];
    t.grad_of(b)[0] += g[0];
  });
  tape.backward(joined);
  EXPECT_EQ(w.grad[0], 2.0);  // used twice
  const auto& order = tape.last_replay_order();
  EXPECT_TRUE(std::is_sorted(order.rbegin(), order.rend()));
  EXPECT_EQ(order.front(), joined.id());
}

TEST(Tape, ParameterGradientsAccumulateAcrossBackwardCalls) {
  Parameter w("w", Tensor::vector({1.0, -1.0}));
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(sum(tape.param(w)));
  }
  EXPECT_EQ(w.grad, Tensor::vector({2.0, 2.0}));
  w.zero_grad();
  EXPECT_EQ(w.grad, Tensor::vector({0.0, 0.0}));
}

// Finite-difference checks, 20 random instances per op.
class GradientCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};

  void expect_ok(const testing::Graph& g, std::function<std::vector<Tensor>()> make) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto r = check_gradients(g, make(), rng);
      ASSERT_LT(r.worst_error, kGradTol) << "trial " << trial;
    }
  }
};

TEST_F(GradientCheck, AddBias) {
  expect_ok([](Tape&, const std::vector<Var>& v) { return add_bias(v[0], v[1]); },
            [&] { return std::vector{random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)}; });
}

TEST_F(GradientCheck, Conv2dSameAndValid) {
  for (Padding pad : {Padding::same, Padding::valid}) {
    expect_ok([pad](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], pad); },
              [&] { return std::vector{random_tensor({2, 2, 4, 5}, rng), random_tensor({3, 2, 3, 3}, rng)}; });
  }
}

TEST_F(GradientCheck, Pooling) {
  for (PoolKind kind : {PoolKind::max, PoolKind::average}) {
    expect_ok([kind](Tape&, const std::vector<Var>& v) { return pool2d(v[0], kind); },
              [&] { return std::vector{testing::distinct_tensor({2, 2, 5, 4}, rng)}; });
  }
}

TEST_F(GradientCheck, ReluSoftmaxFlatten) {
  expect_ok([](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
            [&] { return std::vector{testing::distinct_tensor({3, 4}, rng)}; });
  expect_ok([](Tape&, const std::vector<Var>& v) { return softmax(v[0]); },
            [&] { return std::vector{random_tensor({3, 4}, rng, -3, 3)}; });
  expect_ok([](Tape&, const std::vector<Var>& v) { return flatten(v[0]); },
            [&] { return std::vector{random_tensor({2, 3, 2}, rng)}; });
}

TEST_F(GradientCheck, BatchNormTrainAndInfer) {
  for (Mode mode : {Mode::train, Mode::infer}) {
    expect_ok(
        [mode](Tape&, const std::vector<Var>& v) {
          BatchNormState state(3);
          state.running_mean = Tensor::vector({0.1, -0.2, 0.3});
          state.running_var = Tensor::vector({0.5, 1.5, 2.0});
          return batchnorm(v[0], v[1], v[2], state, mode);
        },
        [&] {
          return std::vector{random_tensor({4, 3}, rng, -2, 2), random_tensor({3}, rng, 0.5, 1.5),
                             random_tensor({3}, rng)};
        });
  }
}

TEST_F(GradientCheck, Dropout) {
  expect_ok(
      [](Tape&, const std::vector<Var>& v) {
        std::mt19937_64 mask_rng(77);
        return dropout(v[0], 0.4, Mode::train, mask_rng);
      },
      [&] { return std::vector{random_tensor({4, 5}, rng)}; });
}

TEST_F(GradientCheck, CrossEntropyAndFusedLoss) {
  const int labels[] = {1, 0, 1};
  expect_ok([&](Tape&, const std::vector<Var>& v) { return cross_entropy(softmax(v[0]), labels); },
            [&] { return std::vector{random_tensor({3, 2}, rng, -2, 2)}; });
  expect_ok([&](Tape&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); },
            [&] { return std::vector{random_tensor({3, 2}, rng, -2, 2)}; });
  expect_ok([&](Tape&, const std::vector<Var>& v) { return sum(v[0]); },
            [&] { return std::vector{random_tensor({3, 2}, rng)}; });
}

TEST(Optimizer, SgdStep) {
  Parameter p("p", Tensor::vector({1.0}));
  p.grad = Tensor::vector({2.0});
  Optimizer sgd({OptimizerKind::sgd, 0.1});
  Parameter* list[] = {&p};
  sgd.step(list);
  EXPECT_NEAR(p.value[0], 0.8, 1e-15);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    Parameter p("p", Tensor::vector({1.5, -2.0}));
    p.zero_grad();
    Optimizer opt({kind, 0.1});
    Parameter* list[] = {&p};
    opt.step(list);
    EXPECT_EQ(p.value, Tensor::vector({1.5, -2.0}));
  }
}

TEST(Optimizer, ShapeMismatchIsDimensionError) {
  Parameter p("p", Tensor::vector({1.0, 2.0}));
  p.grad = Tensor::vector({1.0});
  Optimizer opt({});
  Parameter* list[] = {&p};
  EXPECT_THROW(opt.step(list), DimensionError);
}

TEST(Optimizer, AdamMinimizesSquare) {
  Parameter x("x", Tensor::vector({5.0}));
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  Optimizer adam(cfg);
  Parameter* list[] = {&x};
  for (int step = 0; step < 500; ++step) {
    x.grad = Tensor::vector({2.0 * x.value[0]});
    adam.step(list);
  }
  EXPECT_LT(std::abs(x.value[0]), 0.1);
}

}  // namespace
}  // namespace coilwatch

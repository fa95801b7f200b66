#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "fullglow/adam.hpp"
#include "fullglow/ops.hpp"

using namespace fullglow;
using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace {

// Central differences of a scalar-valued graph against the tape's gradients.
double gradient_error(const Fn& build, const std::vector<Tensor<double>>& inputs, double h = 1e-6) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(build(tape, leaves));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<double> analytic = tape.grad(leaves[i]);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto eval = [&](double delta) {
        auto moved = inputs;
        moved[i][k] += delta;
        Tape<double> t(false);
        std::vector<Var<double>> v;
        for (const auto& m : moved) v.push_back(t.constant(m));
        return build(t, v).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      worst = std::max(worst, std::abs(numeric - analytic[k]) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(s), rng, scale);
}

// Weighted sum so every output element gets a distinct upstream gradient.
Var<double> weighted(Tape<double>& t, Var<double> y) {
  Tensor<double> w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return ops::sum(ops::mul(y, t.constant(w)));
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndBadData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ConfigError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ConfigError);
  EXPECT_THROW(Tensor<float>(Shape{2, 3}).reshaped({4}), ConfigError);
  EXPECT_THROW(Tensor<float>(Shape{2}).item(), UsageError);
}

TEST(Tensor, RelativeErrorUsesUnitFloor) {
  const Tensor<double> a({2}, std::vector<double>{1e-3, 0.0});
  const Tensor<double> b({2}, std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(relative_error(a, b), 1e-3);
  const Tensor<double> c({1}, 10.0), d({1}, 11.0);
  EXPECT_NEAR(relative_error(c, d), 1.0 / 11.0, 1e-15);
}

TEST(Autodiff, ElementwiseGradients) {
  const auto a = randn({2, 3}, 1), b = randn({2, 3}, 2);
  Tensor<double> pos = randn({2, 3}, 3);
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::add(v[0], v[1])); }, {a, b}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::sub(v[0], v[1])); }, {a, b}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::mul(v[0], v[1])); }, {a, b}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::div(v[0], v[1])); }, {a, pos}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::scale(v[0], 2.5)); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::add_scalar(v[0], -1.0)); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::exp(v[0])); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::log(v[0])); }, {pos}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::square(v[0])); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::sigmoid(v[0])); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::log_sigmoid(v[0])); }, {a}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::relu(v[0])); }, {a}), 1e-8);
}

TEST(Autodiff, ReductionAndShapeGradients) {
  const auto x = randn({2, 4, 2, 2}, 4), y = randn({2, 3, 2, 2}, 5);
  EXPECT_LT(gradient_error([](auto&, auto& v) { return ops::mean(v[0]); }, {x}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::sum_per_sample(v[0])); }, {x}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::broadcast(ops::sum(v[0]), 3)); }, {x}),
            1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::flatten(v[0])); }, {x}), 1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::slice_channels(v[0], 1, 3)); }, {x}), 1e-8);
  EXPECT_LT(gradient_error(
                [](auto& t, auto& v) { return weighted(t, ops::concat_channels<double>({v[0], v[1]})); }, {x, y}),
            1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::squeeze2(v[0])); }, {x}), 1e-8);
  EXPECT_LT(gradient_error([](auto&, auto& v) { return ops::sum(ops::gaussian_logp(v[0])); }, {x}), 1e-8);
}

TEST(Autodiff, LayerGradients) {
  const auto x = randn({2, 3, 5, 5}, 6), k = randn({4, 3, 3, 3}, 7, 0.3), b = randn({4}, 8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::conv2d(v[0], v[1], v[2], 1, 1)); },
                           {x, k, b}),
            1e-7);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::conv2d(v[0], v[1], v[2], 2, 1)); },
                           {x, k, b}),
            1e-7);
  const auto xin = randn({2, 5}, 9), w = randn({3, 5}, 10), bias = randn({3}, 11);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::dense(v[0], v[1], v[2])); }, {xin, w, bias}),
            1e-8);
  const auto img = randn({2, 3, 2, 2}, 12);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::channel_affine(v[0], v[1], v[2])); },
                           {img, randn({3}, 13), randn({3}, 14)}),
            1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::channel_affine(v[0], v[1], v[2])); },
                           {img, randn({2, 3}, 15), randn({2, 3}, 16)}),
            1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::channel_mix(v[0], v[1])); },
                           {img, randn({3, 3}, 17)}),
            1e-8);
  EXPECT_LT(gradient_error([](auto& t, auto& v) { return weighted(t, ops::channel_mix(v[0], v[1])); },
                           {img, randn({2, 3, 3}, 18)}),
            1e-8);
}

TEST(Autodiff, LuComposeGradient) {
  const std::vector<std::size_t> perm{2, 0, 1};
  const std::vector<double> sign{1.0, -1.0, 1.0};
  auto build = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
    return weighted(t, ops::lu_compose(v[0], v[1], v[2], perm, sign));
  };
  EXPECT_LT(gradient_error(build, {randn({3}, 19), randn({3}, 20), randn({3}, 21, 0.3)}), 1e-8);
  EXPECT_LT(gradient_error(build, {randn({2, 3}, 22), randn({2, 3}, 23), randn({2, 3}, 24, 0.3)}), 1e-8);
}

TEST(Autodiff, LuComposeMatchesHandProduct) {
  // P = rows (0 1 0; 0 0 1; 1 0 0), L = [1 0; 2 1], U = [e^0.5 3; 0 -e^-1].
  Tape<double> t(false);
  const auto w = ops::lu_compose(t.constant(Tensor<double>({1}, 2.0)), t.constant(Tensor<double>({1}, 3.0)),
                                 t.constant(Tensor<double>({2}, std::vector<double>{0.5, -1.0})), {1, 0},
                                 std::vector<double>{1.0, -1.0})
                     .value();
  const double u00 = std::exp(0.5), u11 = -std::exp(-1.0);
  // L*U = [u00, 3; 2 u00, 6 + u11]; P swaps the rows.
  EXPECT_NEAR(w[0], 2 * u00, 1e-14);
  EXPECT_NEAR(w[1], 6 + u11, 1e-14);
  EXPECT_NEAR(w[2], u00, 1e-14);
  EXPECT_NEAR(w[3], 3.0, 1e-14);
}

TEST(Autodiff, ConvMatchesHandExample) {
  // 3x3 all-ones kernel with padding 1 counts in-image neighbours of each pixel.
  Tape<double> t(false);
  Tensor<double> x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto y = ops::conv2d(t.constant(x), t.constant(Tensor<double>({1, 1, 3, 3}, 1.0)),
                             t.constant(Tensor<double>({1}, 0.5)), 1, 1)
                     .value();
  const std::vector<double> expected{12, 21, 16, 27, 45, 33, 24, 39, 28};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], expected[i] + 0.5);
}

TEST(Autodiff, SqueezeQuadrantOrder) {
  Tape<double> t(false);
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto y = ops::squeeze2(t.constant(x));
  EXPECT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(y.value().storage(), (std::vector<double>{1, 2, 3, 4}));
  const auto big = randn({2, 3, 4, 6}, 25);
  EXPECT_EQ(ops::unsqueeze2(ops::squeeze2(t.constant(big))).value(), big);
}

TEST(Autodiff, ReluDerivativeAtZeroIsZero) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  t.backward(ops::sum(ops::relu(x)));
  EXPECT_EQ(t.grad(x).storage(), (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Autodiff, ParametersAccumulateAcrossTapes) {
  Parameter<double> p{"p", Tensor<double>({2}, 3.0), {}};
  for (int i = 0; i < 2; ++i) {
    Tape<double> t;
    auto v = t.parameter(p);
    EXPECT_EQ(t.parameter(p).id(), v.id());  // cached per tape
    t.backward(ops::sum(ops::square(v)));
    t.accumulate_parameter_grads();
  }
  EXPECT_EQ(p.grad.storage(), (std::vector<double>{12.0, 12.0}));
}

TEST(Autodiff, TapeContracts) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2}, 1.0));
  EXPECT_THROW(t.backward(ops::exp(x)), UsageError);  // not scalar
  Tape<double> once;
  auto y = once.leaf(Tensor<double>({1}, 1.0));
  auto loss = ops::sum(y);
  once.backward(loss);
  EXPECT_THROW(once.backward(loss), UsageError);
  Tape<double> other;
  EXPECT_THROW(other.backward(loss), UsageError);
}

TEST(Autodiff, NonFiniteGradientNamesOperation) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2}, std::vector<double>{0.0, 1.0}));
  try {
    t.backward(ops::sum(ops::log(x)));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.where(), "log");
  }
}

TEST(Autodiff, NoGradTapeRecordsNoRules) {
  Tape<double> t(false);
  auto x = t.leaf(Tensor<double>({2}, 1.0));
  EXPECT_FALSE(ops::exp(x).requires_grad());
}

TEST(Autodiff, ShapeMismatchesAreConfigErrors) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>({2, 3}));
  auto b = t.leaf(Tensor<double>({3, 2}));
  EXPECT_THROW(ops::add(a, b), ConfigError);
  EXPECT_THROW(ops::slice_channels(a, 2, 4), ConfigError);
  EXPECT_THROW(ops::dense(a, b, t.leaf(Tensor<double>({3}))), ConfigError);
}

// Adam against a literal transcription of the update rule.
TEST(Adam, MatchesReferenceUpdate) {
  Parameter<double> p{"w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}), {}};
  AdamState<double> state;
  std::vector<double> ref(p.value.storage()), m(3, 0.0), v(3, 0.0);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Parameter<double>* params[] = {&p};
  for (int step = 1; step <= 25; ++step) {
    p.zero_grad();
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = 2.0 * p.value[i] + std::cos(step + i);
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 2.0 * ref[i] + std::cos(step + i);
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, step)), vh = v[i] / (1 - std::pow(b2, step));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    adam_step<double>(params, state, lr);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value[i], ref[i], 1e-14);
  EXPECT_EQ(state.step, 25u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * sign(g) (up to epsilon).
  Parameter<double> p{"w", Tensor<double>({2}, std::vector<double>{0.0, 0.0}), {}};
  p.grad = Tensor<double>({2}, std::vector<double>{5.0, -0.001});
  AdamState<double> state;
  Parameter<double>* params[] = {&p};
  adam_step<double>(params, state, 1e-4);
  EXPECT_NEAR(p.value[0], -1e-4, 1e-12);
  EXPECT_NEAR(p.value[1], 1e-4, 1e-9);
}

TEST(Adam, RejectsBadInput) {
  Parameter<double> p{"w", Tensor<double>({2}), {}};
  AdamState<double> state;
  Parameter<double>* params[] = {&p};
  EXPECT_THROW(adam_step<double>(params, state, 0.0), UsageError);
  adam_step<double>(params, state, 1e-3);
  p.value = Tensor<double>({3});
  EXPECT_THROW(adam_step<double>(params, state, 1e-3), UsageError);
}

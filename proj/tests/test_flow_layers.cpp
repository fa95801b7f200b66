#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "fullglow/flow_layers.hpp"

using namespace fullglow;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(s), rng, scale);
}

Eigen::MatrixXd dense_w(const InvConvParams<double>& p) {
  const auto w = assemble_invconv(p);
  const auto c = static_cast<Eigen::Index>(p.channels());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w.data(), c, c);
}

// A fixed nonlinear coupling net built only from recorded ops.
std::pair<Var<double>, Var<double>> toy_net(Var<double> x2) {
  return {ops::scale(ops::square(x2), 0.3), ops::add_scalar(ops::scale(x2, -0.7), 0.2)};
}

}  // namespace

TEST(Actnorm, ForwardInverseAndLogdet) {
  Tape<double> t(false);
  const auto x = randn({2, 3, 4, 5}, 1);
  const Tensor<double> ls({3}, std::vector<double>{0.1, -0.4, 0.7}), sh({3}, std::vector<double>{1.0, 0.0, -2.0});
  const auto f = actnorm(t.constant(x), t.constant(ls), t.constant(sh), Direction::forward);
  EXPECT_NEAR(f.y.value()[0], std::exp(0.1) * x[0] + 1.0, 1e-14);
  const double expected = 20 * (0.1 - 0.4 + 0.7);
  EXPECT_NEAR(f.logdet.value()[0], expected, 1e-12);
  EXPECT_NEAR(f.logdet.value()[1], expected, 1e-12);
  const auto b = actnorm(f.y, t.constant(ls), t.constant(sh), Direction::inverse);
  EXPECT_LT(max_abs_diff(b.y.value(), x), 1e-14);
  EXPECT_NEAR(b.logdet.value()[0], -expected, 1e-12);
}

TEST(Actnorm, PerSampleParameters) {
  Tape<double> t(false);
  const auto x = randn({2, 2, 3, 3}, 2);
  const Tensor<double> ls({2, 2}, std::vector<double>{0.5, 0.0, -1.0, 0.25});
  const auto f = actnorm(t.constant(x), t.constant(ls), t.constant(Tensor<double>({2, 2})), Direction::forward);
  EXPECT_NEAR(f.logdet.value()[0], 9 * 0.5, 1e-12);
  EXPECT_NEAR(f.logdet.value()[1], 9 * -0.75, 1e-12);
}

TEST(Actnorm, DataInitStandardizes) {
  auto batch = randn({4, 3, 6, 6}, 3, 2.5);
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] += 3.0;
  const auto p = actnorm_data_init(batch);
  Tape<double> t(false);
  const auto y = actnorm(t.constant(batch), t.constant(p.log_scale), t.constant(p.shift), Direction::forward).y.value();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 36; ++k) {
        const double v = y[(b * 3 + c) * 36 + k];
        s += v;
        s2 += v * v;
        ++n;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    EXPECT_NEAR(s2 / n, 1.0, 1e-10);
  }
}

TEST(Actnorm, DataInitFloorsConstantChannels) {
  const Tensor<double> batch({1, 1, 2, 2}, 4.0);
  const auto p = actnorm_data_init(batch);
  EXPECT_NEAR(p.log_scale[0], -std::log(1e-6), 1e-9);
  EXPECT_TRUE(std::isfinite(p.shift[0]));
}

TEST(InvConv, RotationIsOrthonormal) {
  for (std::size_t c : {1u, 2u, 3u, 6u, 12u, 48u}) {
    std::mt19937_64 rng(c);
    const auto p = random_rotation_lu<double>(c, rng);
    const auto w = dense_w(p);
    EXPECT_LT((w * w.transpose() - Eigen::MatrixXd::Identity(w.rows(), w.cols())).cwiseAbs().maxCoeff(), 1e-12) << c;
    EXPECT_NEAR(std::abs(w.determinant()), 1.0, 1e-10);
    for (double ls : p.log_scale.storage()) EXPECT_TRUE(std::isfinite(ls));
  }
}

TEST(InvConv, LogdetMatchesEigenDeterminant) {
  std::mt19937_64 rng(5);
  auto p = random_rotation_lu<double>(4, rng);
  p.lower = randn({6}, 6, 0.5);
  p.upper = randn({6}, 7, 0.5);
  p.log_scale = randn({4}, 8, 0.5);
  const double logabs = std::log(std::abs(dense_w(p).determinant()));
  Tape<double> t(false);
  const auto x = randn({2, 4, 3, 2}, 9);
  const auto f = invconv(t.constant(x), t.constant(p.lower), t.constant(p.upper), t.constant(p.log_scale), p.perm,
                         p.sign, Direction::forward);
  EXPECT_NEAR(f.logdet.value()[1], 6 * logabs, 1e-10);
  // y[:, :, pixel] = W x[:, :, pixel]
  const Eigen::MatrixXd w = dense_w(p);
  for (int o = 0; o < 4; ++o) {
    double v = 0;
    for (int i = 0; i < 4; ++i) v += w(o, i) * x[i * 6 + 1];
    EXPECT_NEAR(f.y.value()[o * 6 + 1], v, 1e-12);
  }
  const auto b = invconv(f.y, t.constant(p.lower), t.constant(p.upper), t.constant(p.log_scale), p.perm, p.sign,
                         Direction::inverse);
  EXPECT_LT(max_abs_diff(b.y.value(), x), 1e-12);
  EXPECT_NEAR(b.logdet.value()[0], -6 * logabs, 1e-10);
}

TEST(InvConv, InverseRejectsGradientInputs) {
  std::mt19937_64 rng(10);
  const auto p = random_rotation_lu<double>(3, rng);
  Tape<double> t;
  auto x = t.leaf(randn({1, 3, 2, 2}, 11));
  EXPECT_THROW(invconv(x, t.constant(p.lower), t.constant(p.upper), t.constant(p.log_scale), p.perm, p.sign,
                       Direction::inverse),
               UsageError);
}

TEST(Coupling, ForwardInverseAndLogdet) {
  Tape<double> t(false);
  const auto x = randn({2, 4, 3, 3}, 12);
  const auto f = affine_coupling<double>(t.constant(x), toy_net, Direction::forward);
  // Oracle: split, s = sigmoid(0.3 x2^2 + 2), t = -0.7 x2 + 0.2.
  double logdet0 = 0;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < 9; ++k) {
      const double x1 = x[c * 9 + k], x2 = x[(c + 2) * 9 + k];
      const double s = 1 / (1 + std::exp(-(0.3 * x2 * x2 + 2)));
      EXPECT_NEAR(f.y.value()[c * 9 + k], s * x1 - 0.7 * x2 + 0.2, 1e-13);
      EXPECT_EQ(f.y.value()[(c + 2) * 9 + k], x2);
      logdet0 += std::log(s);
    }
  EXPECT_NEAR(f.logdet.value()[0], logdet0, 1e-12);
  const auto b = affine_coupling<double>(f.y, toy_net, Direction::inverse);
  EXPECT_LT(max_abs_diff(b.y.value(), x), 1e-13);
  EXPECT_NEAR(b.logdet.value()[0], -logdet0, 1e-12);
}

TEST(Coupling, OddChannelsRejected) {
  Tape<double> t(false);
  EXPECT_THROW(affine_coupling<double>(t.constant(randn({1, 3, 2, 2}, 13)), toy_net, Direction::forward), ConfigError);
}

TEST(Split, HalvesAndPrior) {
  Tape<double> t(false);
  const auto x = randn({2, 6, 2, 2}, 14);
  const auto s = split_forward(t.constant(x));
  EXPECT_EQ(s.kept.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(s.latent.shape(), (Shape{2, 3, 2, 2}));
  double lp = 0;
  for (std::size_t i = 12; i < 24; ++i) lp += -0.5 * (x[i] * x[i] + std::log(2 * M_PI));
  EXPECT_NEAR(s.logp.value()[0], lp, 1e-12);
  EXPECT_EQ(split_inverse(s.kept, &s.latent, 1.0, nullptr).value(), x);
}

TEST(Split, TemperatureZeroGivesZeros) {
  Tape<double> t(false);
  std::mt19937_64 rng(1);
  const auto y = split_inverse<double>(t.constant(Tensor<double>({1, 2, 2, 2}, 1.0)), nullptr, 0.0, &rng).value();
  for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(y[i], 0.0);
  EXPECT_THROW(sample_normal<double>({2}, -1.0, rng), UsageError);
}

TEST(Split, GaussianLogpTotal) {
  const Tensor<double> z({2}, std::vector<double>{0.0, 1.0});
  EXPECT_NEAR(gaussian_logp_total(z), -std::log(2 * M_PI) - 0.5, 1e-14);
}

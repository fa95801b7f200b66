#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "fullglow/model.hpp"

using namespace fullglow;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(s), rng, scale);
}

ModelConfig tiny(ConditioningMode mode = ConditioningMode::full) {
  ModelConfig c;
  c.n_blocks = 2;
  c.n_flows = 2;
  c.image_size = 8;
  c.coupling_hidden = 8;
  c.conditioning = mode;
  c.seed = 3;
  return c;
}

struct Pair {
  Tensor<double> a, b;
};

Pair images(std::size_t n, std::uint64_t seed) { return {randn({n, 3, 8, 8}, seed, 0.3), randn({n, 3, 8, 8}, seed + 1, 0.3)}; }

}  // namespace

// --- conditioning networks ----------------------------------------------------

TEST(Conditioning, ModuleRngDependsOnlyOnSeedAndName) {
  auto a = module_rng(1, "x"), b = module_rng(1, "x"), c = module_rng(1, "y"), d = module_rng(2, "x");
  const auto va = a();
  EXPECT_EQ(va, b());
  EXPECT_NE(va, c());
  EXPECT_NE(va, d());
}

TEST(Conditioning, TrunkShapesAndConstantOutput) {
  TrunkCN<double> net("n", 5, 4, 4, 12);
  std::mt19937_64 rng(1);
  net.init_hidden(rng, 0.05);
  std::vector<double> bias(12);
  for (std::size_t i = 0; i < 12; ++i) bias[i] = 0.1 * static_cast<double>(i);
  net.set_constant_output(bias);
  Tape<double> t(false);
  const auto y = net(t.constant(randn({3, 5, 4, 4}, 2))).value();
  ASSERT_EQ(y.shape(), (Shape{3, 12}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(y[n * 12 + i], bias[i]);
  EXPECT_EQ(net.parameters().size(), 14u);
}

TEST(Conditioning, CouplingNetStartsAtZero) {
  CouplingCN<double> net("c", 6, 4, 8);
  std::mt19937_64 rng(2);
  init_coupling_cn(net, rng);
  Tape<double> t(false);
  const auto [o1, o2] = net(t.constant(randn({2, 6, 3, 3}, 3)));
  EXPECT_EQ(o1.shape(), (Shape{2, 2, 3, 3}));
  for (double v : o1.value().storage()) EXPECT_EQ(v, 0.0);
  for (double v : o2.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(Conditioning, PackUnpackRoundTrip) {
  std::mt19937_64 rng(4);
  const auto p = random_rotation_lu<double>(4, rng);
  const auto packed = pack_invconv(p);
  ASSERT_EQ(packed.size(), 16u);
  InvConvParams<double> q = p;
  q.lower = Tensor<double>({6});
  q.upper = Tensor<double>({6});
  q.log_scale = Tensor<double>({4});
  unpack_invconv(packed, q);
  EXPECT_EQ(q.lower, p.lower);
  EXPECT_EQ(q.upper, p.upper);
  EXPECT_EQ(q.log_scale, p.log_scale);
}

TEST(Conditioning, InitializedInvConvCnEmitsRotation) {
  TrunkCN<double> net("i", 4, 2, 2, 16);
  std::mt19937_64 rng(5), init(6);
  net.init_hidden(init, 0.05);
  const auto p = init_conditional_invconv(net, 4, rng);
  Tape<double> t(false);
  const auto gen = cn_invconv(net, t.constant(randn({2, 4, 2, 2}, 7)), 4);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(gen.lower.value()[n * 6 + i], p.lower[i]);
}

TEST(Conditioning, InitializedActnormCnStandardizesTarget) {
  TrunkCN<double> net("a", 3, 4, 4, 6);
  std::mt19937_64 init(8);
  net.init_hidden(init, 0.05);
  auto target = randn({2, 3, 4, 4}, 9, 3.0);
  const auto source = randn({2, 3, 4, 4}, 10);
  init_conditional_actnorm(net, source, target);
  Tape<double> t(false);
  const auto gen = cn_actnorm(net, t.constant(source), 3);
  const auto y = actnorm(t.constant(target), gen.log_scale, gen.shift, Direction::forward).y.value();
  double s = 0, s2 = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 16; ++k) {
      const double v = y[(b * 3 + 1) * 16 + k];
      s += v;
      s2 += v * v;
    }
  EXPECT_NEAR(s / 32, 0.0, 1e-12);
  EXPECT_NEAR(s2 / 32, 1.0, 1e-10);
}

// --- model ----------------------------------------------------------------

TEST(Model, PyramidShapesFor32x32) {
  ModelConfig c;
  c.n_flows = 1;
  c.coupling_hidden = 4;
  FullGlow<float> m(c);
  const auto shapes = m.pyramid_shapes(1);
  ASSERT_EQ(shapes.size(), 4u);
  EXPECT_EQ(shapes[0], (Shape{1, 6, 16, 16}));
  EXPECT_EQ(shapes[1], (Shape{1, 12, 8, 8}));
  EXPECT_EQ(shapes[2], (Shape{1, 24, 4, 4}));
  EXPECT_EQ(shapes[3], (Shape{1, 96, 2, 2}));
  std::size_t total = 0;
  for (const auto& s : shapes) total += shape_numel(s);
  EXPECT_EQ(total, 3072u);
}

TEST(Model, ConfigValidationListsEveryProblem) {
  ModelConfig c;
  c.image_size = 30;
  c.temperature = -1;
  c.lambda = 0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("image_size"), std::string::npos);
    EXPECT_NE(msg.find("temperature"), std::string::npos);
    EXPECT_NE(msg.find("lambda"), std::string::npos);
  }
  EXPECT_THROW(parse_conditioning_mode("partial"), ConfigError);
  EXPECT_EQ(parse_conditioning_mode(to_string(ConditioningMode::coupling_only)), ConditioningMode::coupling_only);
}

TEST(Model, RoundTripsBothStacks) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(3, 11);
  m.initialize(a, b);
  const auto src = m.source_forward(a);
  EXPECT_LT(max_abs_diff(m.source_inverse(src.z), a), 1e-11);
  const auto tgt = m.target_forward(b, src.cache);
  EXPECT_LT(max_abs_diff(m.target_inverse(tgt.z, src.cache), b), 1e-11);
}

TEST(Model, UnconditionalIgnoresSource) {
  FullGlow<double> m(tiny(ConditioningMode::unconditional));
  const auto [a, b] = images(1, 12);
  m.initialize(a, b);
  const auto other = randn({1, 3, 8, 8}, 99, 0.3);
  const auto e1 = m.target_forward(b, m.source_forward(a).cache);
  const auto e2 = m.target_forward(b, m.source_forward(other).cache);
  EXPECT_EQ(e1.logp, e2.logp);
  for (std::size_t i = 0; i < e1.z.chunks.size(); ++i) EXPECT_EQ(e1.z.chunks[i], e2.z.chunks[i]);
}

TEST(Model, FullConditioningDependsOnSourceAfterTraining) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(1, 13);
  m.initialize(a, b);
  // Perturb every target-side parameter so the CN outputs vary with the input.
  std::mt19937_64 rng(1);
  for (auto* p : m.target_parameters())
    for (auto& v : p->value.storage()) v += 0.01 * std::normal_distribution<double>()(rng);
  const auto other = randn({1, 3, 8, 8}, 98, 0.3);
  const auto e1 = m.target_forward(b, m.source_forward(a).cache);
  const auto e2 = m.target_forward(b, m.source_forward(other).cache);
  EXPECT_NE(e1.logp[0], e2.logp[0]);
}

TEST(Model, ObjectiveIsLinearInLambda) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(2, 14);
  m.initialize(a, b);
  const double l1 = m.loss(a, b, 1.0), l2 = m.loss(a, b, 2.0), l3 = m.loss(a, b, 3.0);
  EXPECT_NEAR(l3 - l2, l2 - l1, 1e-9 * std::abs(l1));
  // lambda = 1 gives the joint negative log-likelihood.
  const auto src = m.source_forward(a);
  const auto tgt = m.target_forward(b, src.cache);
  const double joint = -0.5 * (src.logp[0] + tgt.logp[0] + src.logp[1] + tgt.logp[1]);
  EXPECT_NEAR(l1, joint, 1e-9 * std::abs(joint));
}

TEST(Model, BpdIsNatsConvertedPerDimension) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(1, 15);
  m.initialize(a, b);
  const auto tgt = m.target_forward(b, m.source_forward(a).cache);
  EXPECT_NEAR(m.bpd(b, a), -tgt.logp[0] / (std::log(2.0) * 192), 1e-12);
}

TEST(Model, TemperatureZeroIsDeterministic) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(1, 16);
  m.initialize(a, b);
  std::mt19937_64 r1(1), r2(2);
  EXPECT_EQ(m.sample(a, 0.0, r1), m.sample(a, 0.0, r2));
  EXPECT_THROW(m.sample(a, -0.1, r1), UsageError);
}

TEST(Model, ContentTransferWithSameConditionReproduces) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(1, 17);
  m.initialize(a, b);
  EXPECT_LT(relative_error(m.content_transfer(a, b, a), b), 1e-10);
}

TEST(Model, RejectsBadShapes) {
  FullGlow<double> m(tiny());
  const auto [a, b] = images(1, 18);
  m.initialize(a, b);
  EXPECT_THROW(m.source_forward(randn({1, 3, 16, 16}, 1)), ConfigError);
  EXPECT_THROW(m.target_forward(randn({1, 3, 8, 8}, 2), CachedCondition<double>{}), ConfigError);
  ModelConfig bad = tiny();
  bad.image_size = 6;
  EXPECT_THROW(FullGlow<double>{bad}, ConfigError);
}

TEST(Model, NonFiniteInputNamesAStep) {
  FullGlow<double> m(tiny());
  auto [a, b] = images(1, 19);
  m.initialize(a, b);
  a[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    m.source_forward(a);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.where().rfind("src.b0.f", 0), 0u) << e.where();
  }
}

TEST(Model, BoundaryPyramidResolutions) {
  ModelConfig c = tiny();
  c.use_boundary = true;
  FullGlow<double> m(c);
  const Tensor<double> bnd({1, 1, 8, 8}, 1.0);
  const auto pyr = m.boundary_pyramid(&bnd);
  ASSERT_EQ(pyr.size(), 2u);
  EXPECT_EQ(pyr[0].shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(pyr[1].shape(), (Shape{1, 1, 2, 2}));
  const auto [a, b] = images(1, 20);
  m.initialize(a, b, &bnd);
  const auto src = m.source_forward(a, &bnd);
  const auto tgt = m.target_forward(b, src.cache);
  EXPECT_LT(max_abs_diff(m.target_inverse(tgt.z, src.cache), b), 1e-11);
}

TEST(Model, ParameterNamesAreUnique) {
  FullGlow<float> m(tiny());
  std::set<std::string> names;
  for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_EQ(m.parameters().size(), m.source_parameters().size() + m.target_parameters().size());
}

TEST(Model, SingleChannelImagesRoundTrip) {
  ModelConfig c = tiny();
  c.in_channels = 1;
  FullGlow<double> m(c);
  const auto a = randn({2, 1, 8, 8}, 21, 0.3), b = randn({2, 1, 8, 8}, 22, 0.3);
  m.initialize(a, b);
  const auto src = m.source_forward(a);
  EXPECT_LT(max_abs_diff(m.source_inverse(src.z), a), 1e-11);
  const auto tgt = m.target_forward(b, src.cache);
  EXPECT_LT(max_abs_diff(m.target_inverse(tgt.z, src.cache), b), 1e-11);
}

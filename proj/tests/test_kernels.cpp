#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "fullglow/kernels.hpp"
#include "fullglow/reference.hpp"

using namespace fullglow;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <typename T>
double max_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST(Kernels, GemmMatchesReference) {
  for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 13, 5}, {64, 33, 70}, {3, 200, 17}}) {
    const auto a = random_vec<double>(m * k, 1), b = random_vec<double>(k * n, 2);
    for (bool acc : {false, true}) {
      auto c1 = random_vec<double>(m * n, 3), c2 = c1;
      kernels::gemm(m, n, k, a.data(), b.data(), c1.data(), acc);
      reference::gemm(m, n, k, a.data(), b.data(), c2.data(), acc);
      EXPECT_LT(max_diff(c1, c2), 1e-12) << m << "x" << n << "x" << k;
    }
  }
}

TEST(Kernels, GemmHandExample) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{7, 8, 9, 10, 11, 12};
  std::vector<double> c(4);
  kernels::gemm(2, 2, 3, a.data(), b.data(), c.data(), false);
  EXPECT_EQ(c, (std::vector<double>{58, 64, 139, 154}));
}

TEST(Kernels, TransposeRoundTrip) {
  const auto a = random_vec<float>(6 * 11, 4);
  std::vector<float> t(a.size()), back(a.size());
  kernels::transpose(6, 11, a.data(), t.data());
  EXPECT_EQ(t[1 * 6 + 2], a[2 * 11 + 1]);
  kernels::transpose(11, 6, t.data(), back.data());
  EXPECT_EQ(back, a);
}

TEST(Kernels, ConvForwardAndBackwardMatchReference) {
  const ConvGeometry geoms[] = {
      {1, 1, 5, 5, 1, 3, 1, 1}, {2, 3, 8, 6, 4, 3, 1, 1}, {2, 6, 4, 4, 8, 1, 1, 0},
      {1, 2, 9, 9, 3, 3, 2, 1}, {3, 4, 7, 5, 2, 3, 1, 0},
  };
  for (const auto& g : geoms) {
    const std::size_t in_n = g.batch * g.in_channels * g.height * g.width;
    const std::size_t out_n = g.batch * g.out_channels * g.out_height() * g.out_width();
    const std::size_t k_n = g.out_channels * g.patch_size();
    const auto x = random_vec<double>(in_n, 5), k = random_vec<double>(k_n, 6), bias = random_vec<double>(g.out_channels, 7);
    std::vector<double> y1(out_n), y2(out_n);
    kernels::conv2d_forward<double>(g, x, k, bias, y1);
    reference::conv2d_forward<double>(g, x, k, bias, y2);
    EXPECT_LT(max_diff(y1, y2), 1e-12);

    const auto gy = random_vec<double>(out_n, 8);
    std::vector<double> gx1(in_n, 0.5), gk1(k_n, 0.5), gb1(g.out_channels, 0.5);
    auto gx2 = gx1, gk2 = gk1, gb2 = gb1;
    kernels::conv2d_backward<double>(g, x, k, gy, gx1, gk1, gb1);
    reference::conv2d_backward<double>(g, x, k, gy, gx2, gk2, gb2);
    EXPECT_LT(max_diff(gx1, gx2), 1e-12);
    EXPECT_LT(max_diff(gk1, gk2), 1e-12);
    EXPECT_LT(max_diff(gb1, gb2), 1e-12);

    // Empty spans skip that gradient.
    std::vector<double> gx3(in_n, 0.0);
    kernels::conv2d_backward<double>(g, x, k, gy, gx3, {}, {});
    std::vector<double> gx4(in_n, 0.0);
    reference::conv2d_backward<double>(g, x, k, gy, gx4, {}, {});
    EXPECT_LT(max_diff(gx3, gx4), 1e-12);
  }
}

TEST(Kernels, ChannelMixMatchesReference) {
  const std::size_t n = 3, c = 5, p = 17;
  const auto x = random_vec<float>(n * c * p, 9);
  for (std::size_t stride : {std::size_t{0}, c * c}) {
    const auto w = random_vec<float>(stride == 0 ? c * c : n * c * c, 10);
    std::vector<float> y1(x.size()), y2(x.size());
    kernels::channel_mix(n, c, p, w.data(), stride, x.data(), y1.data());
    reference::channel_mix(n, c, p, w.data(), stride, x.data(), y2.data());
    EXPECT_LT(max_diff(y1, y2), 1e-5);
  }
}

// OpenMP kernels against the serial reference loops.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fullglow/kernels.hpp"
#include "fullglow/reference.hpp"

using namespace fullglow;

namespace {

std::vector<float> random_vec(std::size_t n) {
  std::mt19937_64 rng(n);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// A coupling-net hidden layer at the first block: 6 -> 64 channels, 16x16.
ConvGeometry coupling_geometry() { return {1, 6, 16, 16, 64, 3, 1, 1}; }

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const ConvGeometry g = coupling_geometry();
  const auto x = random_vec(g.in_channels * g.height * g.width);
  const auto k = random_vec(g.out_channels * g.patch_size());
  const auto b = random_vec(g.out_channels);
  std::vector<float> y(g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_forward<float>(g, x, k, b, y);
    else
      reference::conv2d_forward<float>(g, x, k, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  const ConvGeometry g = coupling_geometry();
  const auto x = random_vec(g.in_channels * g.height * g.width);
  const auto k = random_vec(g.out_channels * g.patch_size());
  const auto gy = random_vec(g.out_channels * g.out_height() * g.out_width());
  std::vector<float> gx(x.size()), gk(k.size()), gb(g.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_backward<float>(g, x, k, gy, gx, gk, gb);
    else
      reference::conv2d_backward<float>(g, x, k, gy, gx, gk, gb);
    benchmark::DoNotOptimize(gx.data());
  }
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n), b = random_vec(n * n);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    else
      reference::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <bool Parallel>
void BM_ChannelMix(benchmark::State& state) {
  const std::size_t c = 12, p = 64;
  const auto w = random_vec(c * c), x = random_vec(c * p);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::channel_mix(1, c, p, w.data(), 0, x.data(), y.data());
    else
      reference::channel_mix(1, c, p, w.data(), 0, x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/kernels");
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/kernels");
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_Gemm<true>)->Name("gemm/kernels")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_ChannelMix<true>)->Name("channel_mix/kernels");
BENCHMARK(BM_ChannelMix<false>)->Name("channel_mix/reference");

BENCHMARK_MAIN();

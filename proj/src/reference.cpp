#include "fullglow/reference.hpp"

#include <algorithm>

namespace fullglow::reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

namespace {

// Input pixel feeding output (oy, ox) through kernel tap (ky, kx), or false if it is padding.
bool source_pixel(const ConvGeometry& g, std::size_t oy, std::size_t ox, std::size_t ky, std::size_t kx,
                  std::size_t& iy, std::size_t& ix) {
  const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
  const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
  if (y < 0 || x < 0 || y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width)) return false;
  iy = static_cast<std::size_t>(y);
  ix = static_cast<std::size_t>(x);
  return true;
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T s = bias[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t iy, ix;
                if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
                s += kernel[((co * g.in_channels + ci) * k + ky) * k + kx] *
                     input[((n * g.in_channels + ci) * g.height + iy) * g.width + ix];
              }
          output[((n * g.out_channels + co) * oh + oy) * ow + ox] = s;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_kernel,
                     std::span<T> grad_bias) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T go = grad_output[((n * g.out_channels + co) * oh + oy) * ow + ox];
          if (!grad_bias.empty()) grad_bias[co] += go;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t iy, ix;
                if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
                const std::size_t ki = ((co * g.in_channels + ci) * k + ky) * k + kx;
                const std::size_t ii = ((n * g.in_channels + ci) * g.height + iy) * g.width + ix;
                if (!grad_kernel.empty()) grad_kernel[ki] += go * input[ii];
                if (!grad_input.empty()) grad_input[ii] += go * kernel[ki];
              }
        }
}

template <typename T>
void channel_mix(std::size_t batch, std::size_t channels, std::size_t pixels, const T* weight,
                 std::size_t weight_stride, const T* x, T* y) {
  for (std::size_t n = 0; n < batch; ++n) {
    const T* w = weight + n * weight_stride;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < pixels; ++p) {
        T s = 0;
        for (std::size_t d = 0; d < channels; ++d) s += w[c * channels + d] * x[(n * channels + d) * pixels + p];
        y[(n * channels + c) * pixels + p] = s;
      }
  }
}

#define FULLGLOW_INSTANTIATE(T)                                                                              \
  template void gemm<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);                \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                  std::span<const T>, std::span<T>);                                         \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,              \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>);            \
  template void channel_mix<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*, T*);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow::reference

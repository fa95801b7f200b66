#include "fullglow/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fullglow::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t rows = g.patch_size();
  const long k = static_cast<long>(g.kernel);
#pragma omp parallel for schedule(static) if (rows * oh * ow > kParallelWork)
  for (std::size_t row = 0; row < rows; ++row) {
    const long kx = static_cast<long>(row) % k;
    const long ky = (static_cast<long>(row) / k) % k;
    const std::size_t ci = row / (g.kernel * g.kernel);
    const T* plane = image + ci * g.height * g.width;
    T* dst = col + row * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const long iy = static_cast<long>(oy * g.stride) + ky - static_cast<long>(g.padding);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const long ix = static_cast<long>(ox * g.stride) + kx - static_cast<long>(g.padding);
        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width);
        dst[oy * ow + ox] = inside ? plane[iy * static_cast<long>(g.width) + ix] : T(0);
      }
    }
  }
}

// Scatter-add the patch matrix back onto the image. Parallel over input
// channels: every image element belongs to exactly one channel.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
#pragma omp parallel for schedule(static) if (g.patch_size() * oh * ow > kParallelWork)
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    T* plane = image + ci * g.height * g.width;
    for (std::size_t r = 0; r < kk; ++r) {
      const long ky = static_cast<long>(r / g.kernel);
      const long kx = static_cast<long>(r % g.kernel);
      const T* src = col + (ci * kk + r) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const long iy = static_cast<long>(oy * g.stride) + ky - static_cast<long>(g.padding);
        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const long ix = static_cast<long>(ox * g.stride) + kx - static_cast<long>(g.padding);
          if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
          plane[iy * static_cast<long>(g.width) + ix] += src[oy * ow + ox];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.padding == 0; }

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const std::size_t blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = blk * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (!accumulate) std::fill(c + i0 * n, c + (i0 + rows) * n, T(0));
    if (rows == 4) {
      T* c0 = c + i0 * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      const T* a0 = a + i0 * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T bv = bp[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        T* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T v = a[i * k + p];
          const T* bp = b + p * n;
          for (std::size_t j = 0; j < n; ++j) ci[j] += v * bp[j];
        }
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t tile = 32;
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
    for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
      const std::size_t r1 = std::min(rows, r0 + tile), c1 = std::min(cols, c0 + tile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t cc = c0; cc < c1; ++cc) out[cc * rows + r] = in[r * cols + cc];
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output) {
  const std::size_t opix = g.out_height() * g.out_width();
  const std::size_t ipix = g.height * g.width;
  const std::size_t patch = g.patch_size();
  std::vector<T> col;
  if (!is_pointwise(g)) col.resize(patch * opix);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* image = input.data() + n * g.in_channels * ipix;
    const T* cols = image;
    if (!is_pointwise(g)) {
      im2col(g, image, col.data());
      cols = col.data();
    }
    T* out = output.data() + n * g.out_channels * opix;
    for (std::size_t co = 0; co < g.out_channels; ++co) std::fill(out + co * opix, out + (co + 1) * opix, bias[co]);
    gemm(g.out_channels, opix, patch, kernel.data(), cols, out, true);
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_kernel,
                     std::span<T> grad_bias) {
  const std::size_t opix = g.out_height() * g.out_width();
  const std::size_t ipix = g.height * g.width;
  const std::size_t patch = g.patch_size();
  const bool pointwise = is_pointwise(g);

  if (!grad_bias.empty()) {
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* go = grad_output.data() + n * g.out_channels * opix;
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        T s = 0;
        for (std::size_t p = 0; p < opix; ++p) s += go[co * opix + p];
        grad_bias[co] += s;
      }
    }
  }

  std::vector<T> col(patch * opix), col_t(patch * opix), kernel_t;
  if (!grad_input.empty()) {
    kernel_t.resize(g.out_channels * patch);
    transpose(g.out_channels, patch, kernel.data(), kernel_t.data());
  }
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* go = grad_output.data() + n * g.out_channels * opix;
    if (!grad_kernel.empty()) {
      const T* image = input.data() + n * g.in_channels * ipix;
      if (pointwise) {
        transpose(patch, opix, image, col_t.data());
      } else {
        im2col(g, image, col.data());
        transpose(patch, opix, col.data(), col_t.data());
      }
      gemm(g.out_channels, patch, opix, go, col_t.data(), grad_kernel.data(), true);
    }
    if (!grad_input.empty()) {
      T* gi = grad_input.data() + n * g.in_channels * ipix;
      if (pointwise) {
        gemm(patch, opix, g.out_channels, kernel_t.data(), go, gi, true);
      } else {
        gemm(patch, opix, g.out_channels, kernel_t.data(), go, col.data(), false);
        col2im_add(g, col.data(), gi);
      }
    }
  }
}

template <typename T>
void channel_mix(std::size_t batch, std::size_t channels, std::size_t pixels, const T* weight,
                 std::size_t weight_stride, const T* x, T* y) {
  for (std::size_t n = 0; n < batch; ++n) {
    gemm(channels, pixels, channels, weight + n * weight_stride, x + n * channels * pixels,
         y + n * channels * pixels, false);
  }
}

#define FULLGLOW_INSTANTIATE(T)                                                                              \
  template void gemm<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);                \
  template void transpose<T>(std::size_t, std::size_t, const T*, T*);                                        \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                  std::span<const T>, std::span<T>);                                         \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,              \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>);            \
  template void channel_mix<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t, const T*, T*);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow::kernels

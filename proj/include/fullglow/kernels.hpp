#pragma once

// Data-parallel compute kernels. Every kernel here has a serial counterpart in
// reference.hpp with the same signature; tests hold the two against each other
// and bench/ times them side by side.
//
// Parallel loops partition the *output* so each element is written by exactly
// one thread in a fixed summation order. Results are therefore bitwise
// independent of the thread count.

#include <cstddef>
#include <span>

namespace fullglow {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t patch_size() const { return in_channels * kernel * kernel; }
};

namespace kernels {

int max_threads();

/// C (+)= A * B with A: m x k, B: k x n, C: m x n, all row-major and contiguous.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

/// output = conv(input, kernel) + bias. Kernel layout out_c x in_c x k x k.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output);

/// Accumulates into whichever gradient spans are non-empty.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_kernel,
                     std::span<T> grad_bias);

/// y[n] = W[n] x[n] where x[n] is channels x pixels. `weight_stride` is 0 when
/// one matrix is shared by the whole batch, channels^2 otherwise.
template <typename T>
void channel_mix(std::size_t batch, std::size_t channels, std::size_t pixels, const T* weight,
                 std::size_t weight_stride, const T* x, T* y);

}  // namespace kernels
}  // namespace fullglow

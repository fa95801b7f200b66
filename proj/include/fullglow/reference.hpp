#pragma once

// Serial, loop-literal versions of the kernels in kernels.hpp. Slow on purpose:
// direct sliding-window sums with no im2col, no blocking, no threads.

#include <span>

#include "fullglow/kernels.hpp"

namespace fullglow::reference {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                    std::span<const T> bias, std::span<T> output);

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                     std::span<const T> grad_output, std::span<T> grad_input, std::span<T> grad_kernel,
                     std::span<T> grad_bias);

template <typename T>
void channel_mix(std::size_t batch, std::size_t channels, std::size_t pixels, const T* weight,
                 std::size_t weight_stride, const T* x, T* y);

}  // namespace fullglow::reference

#pragma once

// Differentiable operations on tape variables. Every op validates shapes and
// throws ConfigError on mismatch. Broadcasting is limited to what the flow
// layers need: per-channel vectors ({C} or {N, C}) against N x C x H x W.

#include <cstddef>
#include <vector>

#include "fullglow/autodiff.hpp"

namespace fullglow::ops {

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> div(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> add_scalar(Var<T> a, T offset);

template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> log(Var<T> a);
template <typename T>
Var<T> square(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
/// log(sigmoid(a)) without forming sigmoid(a) first.
template <typename T>
Var<T> log_sigmoid(Var<T> a);
/// Derivative at exactly 0 is 0.
template <typename T>
Var<T> relu(Var<T> a);

/// Sum of every element, as a scalar (empty shape).
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);
/// Reduces every axis except the first: {N, ...} -> {N}.
template <typename T>
Var<T> sum_per_sample(Var<T> a);
/// Scalar -> {n} filled with the scalar.
template <typename T>
Var<T> broadcast(Var<T> scalar, std::size_t n);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
/// {N, ...} -> {N, prod(rest)}.
template <typename T>
Var<T> flatten(Var<T> a);
/// Slice [begin, end) along axis 1.
template <typename T>
Var<T> slice_channels(Var<T> a, std::size_t begin, std::size_t end);
/// Concatenate along axis 1; all other axes must agree.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// input N x Cin x H x W, kernel Cout x Cin x k x k (k odd), bias Cout.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding);
/// input {N, n} (or {n}), weight {m, n}, bias {m} -> {N, m} (or {m}).
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);

/// y[n,c,h,w] = x[n,c,h,w] * scale[(n,)c] + shift[(n,)c].
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale, Var<T> shift);
/// y[n,:,p] = W[(n)] x[n,:,p]; weight is {C, C} or {N, C, C}.
template <typename T>
Var<T> channel_mix(Var<T> x, Var<T> weight);

/// W = P * L * (U + diag(sign * exp(log_scale))).
/// lower/upper hold the strictly-triangular entries in row-major order,
/// shaped {C(C-1)/2} or {N, C(C-1)/2}; log_scale is {C} or {N, C}.
/// `perm[i]` is the column holding the 1 in row i of P.
template <typename T>
Var<T> lu_compose(Var<T> lower, Var<T> upper, Var<T> log_scale, const std::vector<std::size_t>& perm,
                  const std::vector<T>& sign);

/// Space-to-depth: N x C x H x W -> N x 4C x H/2 x W/2. Output channel
/// 4c + q holds quadrant q = (top-left, top-right, bottom-left, bottom-right).
template <typename T>
Var<T> squeeze2(Var<T> x);
template <typename T>
Var<T> unsqueeze2(Var<T> x);

/// Per-sample standard-normal log-density: {N, ...} -> {N}.
template <typename T>
Var<T> gaussian_logp(Var<T> z);

}  // namespace fullglow::ops

#pragma once

// Invertible building blocks. Each layer maps x -> y together with a
// per-sample log-determinant of shape {N}; the inverse direction reports the
// negated value so that forward + inverse logdets cancel exactly.

#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "fullglow/ops.hpp"

namespace fullglow {

enum class Direction { forward, inverse };

template <typename T>
struct FlowOutput {
  Var<T> y;
  Var<T> logdet;  // {N}
};

// ---------------------------------------------------------------------------
// actnorm: y = exp(log_scale) * x + shift, per channel.

template <typename T>
struct ActnormParams {
  Tensor<T> log_scale;  // {C}
  Tensor<T> shift;      // {C}
};

/// log_scale/shift are {C} (shared) or {N, C} (per sample, generated by a CN).
template <typename T>
FlowOutput<T> actnorm(Var<T> x, Var<T> log_scale, Var<T> shift, Direction direction);

/// Parameters that standardize `batch` (N x C x H x W) per channel.
/// Standard deviations below 1e-6 are floored at 1e-6.
template <typename T>
ActnormParams<T> actnorm_data_init(const Tensor<T>& batch);

// ---------------------------------------------------------------------------
// invertible 1x1 convolution, W = P L (U + diag(sign * exp(log_scale))).

template <typename T>
struct InvConvParams {
  std::vector<std::size_t> perm;  // row r of P has its 1 in column perm[r]; frozen
  std::vector<T> sign;            // frozen at initialization
  Tensor<T> lower;                // strictly-lower entries, row-major, C(C-1)/2
  Tensor<T> upper;                // strictly-upper entries, row-major, C(C-1)/2
  Tensor<T> log_scale;            // {C}

  std::size_t channels() const { return perm.size(); }
};

/// Orthonormal factor of the QR decomposition of a C x C standard-normal matrix,
/// factored with partial pivoting. Resamples on numerical rank deficiency.
template <typename T>
InvConvParams<T> random_rotation_lu(std::size_t channels, std::mt19937_64& rng);

/// Dense W for a single parameter set ({C} log_scale), row-major C x C.
template <typename T>
std::vector<T> assemble_invconv(const InvConvParams<T>& p);

/// Inverse uses forward/back substitution on the triangular factors.
/// The inverse is not differentiable: its inputs must not require gradients.
template <typename T>
FlowOutput<T> invconv(Var<T> x, Var<T> lower, Var<T> upper, Var<T> log_scale, const std::vector<std::size_t>& perm,
                      const std::vector<T>& sign, Direction direction);

// ---------------------------------------------------------------------------
// affine coupling on channel halves.

/// Produces (o1, o2), each N x C/2 x H x W, from the untouched half x2.
template <typename T>
using CouplingNet = std::function<std::pair<Var<T>, Var<T>>(Var<T> x2)>;

/// s = sigmoid(o1 + 2), t = o2; forward y1 = s * x1 + t, y2 = x2.
template <typename T>
FlowOutput<T> affine_coupling(Var<T> x, const CouplingNet<T>& net, Direction direction);

// ---------------------------------------------------------------------------
// multi-scale plumbing.

template <typename T>
struct SplitOutput {
  Var<T> kept;    // first C channels
  Var<T> latent;  // last C channels
  Var<T> logp;    // {N}, standard-normal log-density of `latent`
};

template <typename T>
SplitOutput<T> split_forward(Var<T> x);

/// Reassembles [kept, latent]. Without a latent, one is drawn from
/// N(0, temperature^2); temperature 0 gives exact zeros.
template <typename T>
Var<T> split_inverse(Var<T> kept, const Var<T>* latent, double temperature, std::mt19937_64* rng);

/// Standard-normal log-density summed over all elements (unbatched oracle form).
template <typename T>
double gaussian_logp_total(const Tensor<T>& z);

template <typename T>
Tensor<T> sample_normal(const Shape& shape, double temperature, std::mt19937_64& rng);

/// Factored-out latents, one chunk per split plus the final block output.
template <typename T>
struct LatentPyramid {
  std::vector<Tensor<T>> chunks;

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.size();
    return n;
  }
};

}  // namespace fullglow

#include "fullglow/flow_layers.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

namespace fullglow {

namespace {

// Per-sample logdet H*W*sum(v) for a {C} or {N, C} per-channel vector.
template <typename T>
Var<T> spatial_logdet(Var<T> per_channel, std::size_t batch, std::size_t pixels) {
  const T hw = static_cast<T>(pixels);
  if (per_channel.shape().size() == 1) return ops::broadcast(ops::scale(ops::sum(per_channel), hw), batch);
  return ops::scale(ops::sum_per_sample(per_channel), hw);
}

}  // namespace

template <typename T>
FlowOutput<T> actnorm(Var<T> x, Var<T> log_scale, Var<T> shift, Direction direction) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ConfigError("actnorm: expected N x C x H x W, got " + shape_string(s));
  if (!log_scale.value().all_finite() || !shift.value().all_finite()) {
    throw NumericalError("actnorm parameters are not finite", "actnorm");
  }
  const std::size_t pixels = s[2] * s[3];
  Var<T> logdet = spatial_logdet(log_scale, s[0], pixels);
  if (direction == Direction::forward) {
    return {ops::channel_affine(x, ops::exp(log_scale), shift), logdet};
  }
  Var<T> inv_scale = ops::exp(ops::scale(log_scale, T(-1)));
  Var<T> inv_shift = ops::scale(ops::mul(shift, inv_scale), T(-1));
  return {ops::channel_affine(x, inv_scale, inv_shift), ops::scale(logdet, T(-1))};
}

template <typename T>
ActnormParams<T> actnorm_data_init(const Tensor<T>& batch) {
  if (batch.rank() != 4 || batch.empty()) throw UsageError("actnorm_data_init: expected a non-empty N x C x H x W batch");
  const std::size_t n = batch.dim(0), c = batch.dim(1), pixels = batch.dim(2) * batch.dim(3);
  ActnormParams<T> p{Tensor<T>(Shape{c}), Tensor<T>(Shape{c})};
  const double count = static_cast<double>(n * pixels);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < pixels; ++i) mean += batch[(b * c + ch) * pixels + i];
    mean /= count;
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < pixels; ++i) {
        const double d = batch[(b * c + ch) * pixels + i] - mean;
        var += d * d;
      }
    const double stddev = std::max(std::sqrt(var / count), 1e-6);
    p.log_scale[ch] = static_cast<T>(-std::log(stddev));
    p.shift[ch] = static_cast<T>(-mean / stddev);
  }
  return p;
}

template <typename T>
InvConvParams<T> random_rotation_lu(std::size_t channels, std::mt19937_64& rng) {
  if (channels < 1) throw ConfigError("random_rotation_lu: need at least one channel");
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto c = static_cast<Eigen::Index>(channels);
  for (;;) {
    Eigen::MatrixXd gaussian(c, c);
    for (Eigen::Index i = 0; i < c; ++i)
      for (Eigen::Index j = 0; j < c; ++j) gaussian(i, j) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
    const Eigen::MatrixXd w0 = qr.householderQ() * Eigen::MatrixXd::Identity(c, c);

    // Eigen: P_e * W0 = L U, so W0 = P_e^T L U.
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(w0);
    const Eigen::MatrixXd packed = lu.matrixLU();
    const Eigen::MatrixXd p = lu.permutationP().toDenseMatrix().cast<double>().transpose();

    bool degenerate = false;
    for (Eigen::Index i = 0; i < c; ++i) degenerate = degenerate || std::abs(packed(i, i)) < 1e-12;
    if (degenerate) continue;

    InvConvParams<T> out;
    out.perm.resize(channels);
    for (Eigen::Index r = 0; r < c; ++r)
      for (Eigen::Index col = 0; col < c; ++col)
        if (p(r, col) > 0.5) out.perm[static_cast<std::size_t>(r)] = static_cast<std::size_t>(col);
    const std::size_t tri = channels * (channels - 1) / 2;
    std::vector<T> lower, upper;
    lower.reserve(tri);
    upper.reserve(tri);
    out.log_scale = Tensor<T>(Shape{channels});
    for (Eigen::Index i = 0; i < c; ++i) {
      for (Eigen::Index j = 0; j < i; ++j) lower.push_back(static_cast<T>(packed(i, j)));
      const double d = packed(i, i);
      out.sign.push_back(d < 0 ? T(-1) : T(1));
      out.log_scale[static_cast<std::size_t>(i)] = static_cast<T>(std::log(std::abs(d)));
      for (Eigen::Index j = i + 1; j < c; ++j) upper.push_back(static_cast<T>(packed(i, j)));
    }
    if (tri > 0) {
      out.lower = Tensor<T>(Shape{tri}, std::move(lower));
      out.upper = Tensor<T>(Shape{tri}, std::move(upper));
    }
    return out;
  }
}

template <typename T>
std::vector<T> assemble_invconv(const InvConvParams<T>& p) {
  Tape<T> tape(false);
  const std::size_t c = p.channels();
  const std::size_t tri = c * (c - 1) / 2;
  Tensor<T> lower = tri ? p.lower : Tensor<T>(Shape{1});
  Tensor<T> upper = tri ? p.upper : Tensor<T>(Shape{1});
  Var<T> w = ops::lu_compose(tape.constant(lower), tape.constant(upper), tape.constant(p.log_scale), p.perm, p.sign);
  return w.value().storage();
}

template <typename T>
FlowOutput<T> invconv(Var<T> x, Var<T> lower, Var<T> upper, Var<T> log_scale, const std::vector<std::size_t>& perm,
                      const std::vector<T>& sign, Direction direction) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != perm.size()) {
    throw ConfigError("invconv: input " + shape_string(s) + " does not match " + std::to_string(perm.size()) +
                      " channels");
  }
  if (!log_scale.value().all_finite() || !lower.value().all_finite() || !upper.value().all_finite()) {
    throw NumericalError("invconv parameters are not finite", "invconv");
  }
  const std::size_t batch = s[0], c = s[1], pixels = s[2] * s[3];
  Var<T> logdet = spatial_logdet(log_scale, batch, pixels);
  if (direction == Direction::forward) {
    return {ops::channel_mix(x, ops::lu_compose(lower, upper, log_scale, perm, sign)), logdet};
  }

  for (const Var<T>* v : {&x, &lower, &upper, &log_scale}) {
    if (v->requires_grad()) throw UsageError("invconv inverse is not differentiable; use a no-grad tape");
  }
  const bool per_sample = log_scale.shape().size() == 2;
  const std::size_t tri = c * (c - 1) / 2;
  const auto& yv = x.value();
  Tensor<T> xv(s);
  std::vector<T> v(c * pixels);
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t pn = per_sample ? n : 0;
    const T* lo = lower.value().data().data() + pn * tri;
    const T* up = upper.value().data().data() + pn * tri;
    const T* ls = log_scale.value().data().data() + pn * c;
    // Strictly-triangular entry (i, j) offsets in the packed row-major layouts.
    auto lower_at = [&](std::size_t i, std::size_t j) { return lo[i * (i - 1) / 2 + j]; };
    auto upper_at = [&](std::size_t i, std::size_t j) { return up[i * c - i * (i + 1) / 2 + (j - i - 1)]; };
    const T* y = yv.data().data() + n * c * pixels;
    T* out = xv.data().data() + n * c * pixels;
    // v = P^T y
    for (std::size_t r = 0; r < c; ++r) std::copy_n(y + r * pixels, pixels, v.data() + perm[r] * pixels);
    // L w = v, unit diagonal, in place
    for (std::size_t i = 1; i < c; ++i)
      for (std::size_t j = 0; j < i; ++j) {
        const T l = lower_at(i, j);
        for (std::size_t p = 0; p < pixels; ++p) v[i * pixels + p] -= l * v[j * pixels + p];
      }
    // (U + diag) x = w
    for (std::size_t i = c; i-- > 0;) {
      T* row = out + i * pixels;
      std::copy_n(v.data() + i * pixels, pixels, row);
      for (std::size_t j = i + 1; j < c; ++j) {
        const T u = upper_at(i, j);
        for (std::size_t p = 0; p < pixels; ++p) row[p] -= u * out[j * pixels + p];
      }
      const T inv_diag = T(1) / (sign[i] * std::exp(ls[i]));
      for (std::size_t p = 0; p < pixels; ++p) row[p] *= inv_diag;
    }
  }
  Var<T> y = x.tape().record("invconv_inverse", std::move(xv), {x, lower, upper, log_scale}, nullptr);
  return {y, ops::scale(logdet, T(-1))};
}

template <typename T>
FlowOutput<T> affine_coupling(Var<T> x, const CouplingNet<T>& net, Direction direction) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ConfigError("coupling: expected N x C x H x W, got " + shape_string(s));
  if (s[1] % 2) throw ConfigError("coupling: channel count must be even, got " + std::to_string(s[1]));
  const std::size_t half = s[1] / 2;
  Var<T> x1 = ops::slice_channels(x, 0, half);
  Var<T> x2 = ops::slice_channels(x, half, s[1]);
  auto [o1, o2] = net(x2);
  const Shape half_shape{s[0], half, s[2], s[3]};
  if (o1.shape() != half_shape || o2.shape() != half_shape) {
    throw ConfigError("coupling: network output must be " + shape_string(half_shape));
  }
  Var<T> shifted = ops::add_scalar(o1, T(2));
  Var<T> scale = ops::sigmoid(shifted);
  Var<T> logdet = ops::sum_per_sample(ops::log_sigmoid(shifted));
  if (direction == Direction::forward) {
    Var<T> y1 = ops::add(ops::mul(scale, x1), o2);
    return {ops::concat_channels<T>({y1, x2}), logdet};
  }
  Var<T> r1 = ops::div(ops::sub(x1, o2), scale);
  return {ops::concat_channels<T>({r1, x2}), ops::scale(logdet, T(-1))};
}

template <typename T>
SplitOutput<T> split_forward(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] % 2) throw ConfigError("split: channel count must be even, got " + shape_string(s));
  const std::size_t half = s[1] / 2;
  Var<T> latent = ops::slice_channels(x, half, s[1]);
  return {ops::slice_channels(x, 0, half), latent, ops::gaussian_logp(latent)};
}

template <typename T>
Tensor<T> sample_normal(const Shape& shape, double temperature, std::mt19937_64& rng) {
  if (temperature < 0.0) throw UsageError("temperature must be >= 0");
  Tensor<T> z(shape);
  if (temperature == 0.0) return z;
  std::normal_distribution<double> normal(0.0, temperature);
  for (auto& v : z.data()) v = static_cast<T>(normal(rng));
  return z;
}

template <typename T>
Var<T> split_inverse(Var<T> kept, const Var<T>* latent, double temperature, std::mt19937_64* rng) {
  if (temperature < 0.0) throw UsageError("split_inverse: temperature must be >= 0");
  if (latent) return ops::concat_channels<T>({kept, *latent});
  if (temperature > 0.0 && !rng) throw UsageError("split_inverse: sampling needs an rng");
  std::mt19937_64 unused;
  Var<T> z = kept.tape().constant(sample_normal<T>(kept.shape(), temperature, rng ? *rng : unused));
  return ops::concat_channels<T>({kept, z});
}

template <typename T>
double gaussian_logp_total(const Tensor<T>& z) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (T v : z.data()) acc += -0.5 * static_cast<double>(v) * static_cast<double>(v) - half_log_2pi;
  return acc;
}

#define FULLGLOW_INSTANTIATE(T)                                                                                \
  template FlowOutput<T> actnorm<T>(Var<T>, Var<T>, Var<T>, Direction);                                         \
  template ActnormParams<T> actnorm_data_init<T>(const Tensor<T>&);                                             \
  template InvConvParams<T> random_rotation_lu<T>(std::size_t, std::mt19937_64&);                               \
  template std::vector<T> assemble_invconv<T>(const InvConvParams<T>&);                                         \
  template FlowOutput<T> invconv<T>(Var<T>, Var<T>, Var<T>, Var<T>, const std::vector<std::size_t>&,            \
                                    const std::vector<T>&, Direction);                                          \
  template FlowOutput<T> affine_coupling<T>(Var<T>, const CouplingNet<T>&, Direction);                          \
  template SplitOutput<T> split_forward<T>(Var<T>);                                                             \
  template Var<T> split_inverse<T>(Var<T>, const Var<T>*, double, std::mt19937_64*);                            \
  template double gaussian_logp_total<T>(const Tensor<T>&);                                                     \
  template Tensor<T> sample_normal<T>(const Shape&, double, std::mt19937_64&);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow

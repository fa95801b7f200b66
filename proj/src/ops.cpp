#include "fullglow/ops.hpp"

#include <cmath>
#include <numbers>

#include "fullglow/kernels.hpp"

namespace fullglow::ops {

namespace {

template <typename T>
void require_same_shape(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

// Elementwise map with derivative dy/dx = deriv(x, y).
template <typename T, typename F, typename D>
Var<T> unary(std::string_view op, Var<T> a, F f, D deriv) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(op, std::move(y), {a}, [deriv](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& x = ctx.input(0);
    const auto& y = ctx.output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(x[i], y[i]);
  });
}

// Per-channel vector access for {C} or {N, C} operands.
struct ChannelBroadcast {
  std::size_t batch, channels, pixels;
  bool per_sample;

  std::size_t index(std::size_t n, std::size_t c) const { return per_sample ? n * channels + c : c; }
};

template <typename T>
ChannelBroadcast channel_broadcast(std::string_view op, const Shape& x, const Shape& v) {
  if (x.size() != 4) throw ConfigError(std::string(op) + ": expected N x C x H x W, got " + shape_string(x));
  ChannelBroadcast b{x[0], x[1], x[2] * x[3], false};
  if (v == Shape{x[1]}) return b;
  if (v == Shape{x[0], x[1]}) {
    b.per_sample = true;
    return b;
  }
  throw ConfigError(std::string(op) + ": per-channel operand " + shape_string(v) + " does not fit " +
                    shape_string(x));
}

template <typename T>
struct LuFactors {
  std::vector<T> lower;  // C x C unit lower
  std::vector<T> upper;  // C x C, diagonal = sign * exp(log_scale)
};

template <typename T>
LuFactors<T> unpack_lu(std::size_t c, const T* lower, const T* upper, const T* log_scale, const std::vector<T>& sign) {
  LuFactors<T> f{std::vector<T>(c * c, T(0)), std::vector<T>(c * c, T(0))};
  std::size_t li = 0, ui = 0;
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < i; ++j) f.lower[i * c + j] = lower[li++];
    f.lower[i * c + i] = T(1);
    f.upper[i * c + i] = sign[i] * std::exp(log_scale[i]);
    for (std::size_t j = i + 1; j < c; ++j) f.upper[i * c + j] = upper[ui++];
  }
  return f;
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a, b);
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape().record("add", std::move(y), {a, b}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      auto& gi = ctx.grad_input(k);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a, b);
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape().record("sub", std::move(y), {a, b}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      auto& ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      auto& gb = ctx.grad_input(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a, b);
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape().record("mul", std::move(y), {a, b}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      const auto& bv = ctx.input(1);
      auto& ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (ctx.needs_grad(1)) {
      const auto& av = ctx.input(0);
      auto& gb = ctx.grad_input(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  require_same_shape("div", a, b);
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
  return a.tape().record("div", std::move(y), {a, b}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& bv = ctx.input(1);
    if (ctx.needs_grad(0)) {
      auto& ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (ctx.needs_grad(1)) {
      const auto& y = ctx.output();
      auto& gb = ctx.grad_input(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary<T>("scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  return unary<T>("add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> log_sigmoid(Var<T> a) {
  // log sigmoid(x) = -softplus(-x) = min(x, 0) - log1p(exp(-|x|))
  return unary<T>(
      "log_sigmoid", a, [](T x) { return std::min(x, T(0)) - std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) { return T(1) / (T(1) + std::exp(x)); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sum(Var<T> a) {
  return a.tape().record("sum", Tensor<T>::scalar(a.value().sum()), {a}, [](BackwardContext<T>& ctx) {
    const T g = ctx.grad_output()[0];
    auto& ga = ctx.grad_input(0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> sum_per_sample(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() < 1) throw ConfigError("sum_per_sample: scalar input");
  const std::size_t n = x.dim(0), inner = x.size() / n;
  Tensor<T> y(Shape{n});
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::size_t i = 0; i < inner; ++i) acc += x[s * inner + i];
    y[s] = acc;
  }
  return a.tape().record("sum_per_sample", std::move(y), {a}, [n, inner](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& ga = ctx.grad_input(0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < inner; ++i) ga[s * inner + i] += g[s];
  });
}

template <typename T>
Var<T> broadcast(Var<T> scalar, std::size_t n) {
  if (scalar.value().size() != 1) throw ConfigError("broadcast: expected a scalar");
  Tensor<T> y(Shape{n}, scalar.value()[0]);
  return scalar.tape().record("broadcast", std::move(y), {scalar}, [](BackwardContext<T>& ctx) {
    ctx.grad_input(0)[0] += ctx.grad_output().sum();
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(y), {a}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& ga = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> flatten(Var<T> a) {
  const auto& s = a.shape();
  if (s.empty()) throw ConfigError("flatten: scalar input");
  return reshape(a, Shape{s[0], a.value().size() / s[0]});
}

template <typename T>
Var<T> slice_channels(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& s = a.shape();
  if (s.size() < 2 || begin >= end || end > s[1]) {
    throw ConfigError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                      shape_string(s));
  }
  const std::size_t outer = s[0], width = s[1];
  const std::size_t inner = a.value().size() / (outer * width);
  Shape out_shape = s;
  out_shape[1] = end - begin;
  Tensor<T> y(out_shape);
  const auto& x = a.value();
  const std::size_t span_len = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + (o * width + begin) * inner, span_len, y.data().begin() + o * span_len);
  }
  return a.tape().record("slice_channels", std::move(y), {a},
                         [outer, width, inner, begin, span_len](BackwardContext<T>& ctx) {
                           const auto& g = ctx.grad_output();
                           auto& ga = ctx.grad_input(0);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < span_len; ++i)
                               ga[(o * width + begin) * inner + i] += g[o * span_len + i];
                         });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw ConfigError("concat_channels: rank must be >= 2");
  const std::size_t outer = first[0];
  const std::size_t inner = parts.front().value().size() / (first[0] * first[1]);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ConfigError("concat_channels: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != 1 && s[d] != first[d]) {
        throw ConfigError("concat_channels: " + shape_string(s) + " incompatible with " + shape_string(first));
      }
    }
    widths.push_back(s[1]);
    total += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = total;
  Tensor<T> y(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].value();
    const std::size_t len = widths[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data().begin() + o * len, len, y.data().begin() + (o * total + offset) * inner);
    }
    offset += widths[k];
  }
  return parts.front().tape().record(
      "concat_channels", std::move(y), parts, [outer, inner, total, widths](BackwardContext<T>& ctx) {
        const auto& g = ctx.grad_output();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t len = widths[k] * inner;
          if (ctx.needs_grad(k)) {
            auto& gk = ctx.grad_input(k);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < len; ++i) gk[o * len + i] += g[(o * total + offset) * inner + i];
          }
          offset += widths[k];
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4) {
    throw ConfigError("conv2d: expected rank-4 input and kernel, got " + shape_string(xs) + ", " + shape_string(ks));
  }
  if (ks[2] != ks[3] || ks[2] % 2 == 0) throw ConfigError("conv2d: kernel must be square with odd size");
  if (ks[1] != xs[1]) {
    throw ConfigError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                      std::to_string(xs[1]));
  }
  if (bias.shape() != Shape{ks[0]}) throw ConfigError("conv2d: bias must have one entry per output channel");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[2]) throw ConfigError("conv2d: kernel larger than input");

  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], stride, padding};
  Tensor<T> y(Shape{g.batch, g.out_channels, g.out_height(), g.out_width()});
  kernels::conv2d_forward<T>(g, input.value().data(), kernel.value().data(), bias.value().data(), y.data());
  return input.tape().record("conv2d", std::move(y), {input, kernel, bias}, [g](BackwardContext<T>& ctx) {
    std::span<T> gi, gk, gb;
    if (ctx.needs_grad(0)) gi = ctx.grad_input(0).data();
    if (ctx.needs_grad(1)) gk = ctx.grad_input(1).data();
    if (ctx.needs_grad(2)) gb = ctx.grad_input(2).data();
    kernels::conv2d_backward<T>(g, ctx.input(0).data(), ctx.input(1).data(), ctx.grad_output().data(), gi, gk, gb);
  });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  if (ws.size() != 2) throw ConfigError("dense: weight must be m x n, got " + shape_string(ws));
  const std::size_t m = ws[0], n = ws[1];
  const bool batched = xs.size() == 2;
  if (!(batched || xs.size() == 1) || xs.back() != n) {
    throw ConfigError("dense: input " + shape_string(xs) + " does not match weight " + shape_string(ws));
  }
  if (bias.shape() != Shape{m}) throw ConfigError("dense: bias length must be " + std::to_string(m));
  const std::size_t rows = batched ? xs[0] : 1;
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  Tensor<T> y(batched ? Shape{rows, m} : Shape{m});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < m; ++i) {
      T s = b[i];
      for (std::size_t j = 0; j < n; ++j) s += w[i * n + j] * x[r * n + j];
      y[r * m + i] = s;
    }
  return input.tape().record("dense", std::move(y), {input, weight, bias}, [rows, m, n](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& x = ctx.input(0);
    const auto& w = ctx.input(1);
    if (ctx.needs_grad(0)) {
      auto& gx = ctx.grad_input(0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < m; ++i) {
          const T gi = g[r * m + i];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += gi * w[i * n + j];
        }
    }
    if (ctx.needs_grad(1)) {
      auto& gw = ctx.grad_input(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < m; ++i) {
          const T gi = g[r * m + i];
          for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += gi * x[r * n + j];
        }
    }
    if (ctx.needs_grad(2)) {
      auto& gb = ctx.grad_input(2);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[r * m + i];
    }
  });
}

template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale_v, Var<T> shift_v) {
  if (scale_v.shape() != shift_v.shape()) throw ConfigError("channel_affine: scale/shift shape mismatch");
  const ChannelBroadcast b = channel_broadcast<T>("channel_affine", x.shape(), scale_v.shape());
  const auto& xv = x.value();
  const auto& sv = scale_v.value();
  const auto& tv = shift_v.value();
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < b.batch; ++n)
    for (std::size_t c = 0; c < b.channels; ++c) {
      const T s = sv[b.index(n, c)], t = tv[b.index(n, c)];
      const std::size_t base = (n * b.channels + c) * b.pixels;
      for (std::size_t p = 0; p < b.pixels; ++p) y[base + p] = xv[base + p] * s + t;
    }
  return x.tape().record("channel_affine", std::move(y), {x, scale_v, shift_v}, [b](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& xv = ctx.input(0);
    const auto& sv = ctx.input(1);
    Tensor<T>* gx = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
    Tensor<T>* gs = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
    Tensor<T>* gt = ctx.needs_grad(2) ? &ctx.grad_input(2) : nullptr;
    for (std::size_t n = 0; n < b.batch; ++n)
      for (std::size_t c = 0; c < b.channels; ++c) {
        const std::size_t base = (n * b.channels + c) * b.pixels;
        const T s = sv[b.index(n, c)];
        T ds = 0, dt = 0;
        for (std::size_t p = 0; p < b.pixels; ++p) {
          const T gp = g[base + p];
          if (gx) (*gx)[base + p] += gp * s;
          ds += gp * xv[base + p];
          dt += gp;
        }
        if (gs) (*gs)[b.index(n, c)] += ds;
        if (gt) (*gt)[b.index(n, c)] += dt;
      }
  });
}

template <typename T>
Var<T> channel_mix(Var<T> x, Var<T> weight) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ConfigError("channel_mix: expected N x C x H x W, got " + shape_string(xs));
  const std::size_t batch = xs[0], c = xs[1], pixels = xs[2] * xs[3];
  std::size_t w_stride = 0;
  if (weight.shape() == Shape{batch, c, c}) {
    w_stride = c * c;
  } else if (weight.shape() != Shape{c, c}) {
    throw ConfigError("channel_mix: weight " + shape_string(weight.shape()) + " does not fit " + shape_string(xs));
  }
  Tensor<T> y(xs);
  kernels::channel_mix<T>(batch, c, pixels, weight.value().data().data(), w_stride, x.value().data().data(),
                          y.data().data());
  return x.tape().record("channel_mix", std::move(y), {x, weight}, [batch, c, pixels, w_stride](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& xv = ctx.input(0);
    const auto& w = ctx.input(1);
    std::vector<T> wt(c * c), xt(c * pixels);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* gn = g.data().data() + n * c * pixels;
      if (ctx.needs_grad(0)) {
        kernels::transpose(c, c, w.data().data() + n * w_stride, wt.data());
        kernels::gemm(c, pixels, c, wt.data(), gn, ctx.grad_input(0).data().data() + n * c * pixels, true);
      }
      if (ctx.needs_grad(1)) {
        kernels::transpose(c, pixels, xv.data().data() + n * c * pixels, xt.data());
        kernels::gemm(c, c, pixels, gn, xt.data(), ctx.grad_input(1).data().data() + n * w_stride, true);
      }
    }
  });
}

template <typename T>
Var<T> lu_compose(Var<T> lower, Var<T> upper, Var<T> log_scale, const std::vector<std::size_t>& perm,
                  const std::vector<T>& sign) {
  const std::size_t c = perm.size();
  const std::size_t tri = c * (c - 1) / 2;
  const auto& ls = log_scale.shape();
  const bool batched = ls.size() == 2;
  const std::size_t batch = batched ? ls[0] : 1;
  const Shape tri_shape = batched ? Shape{batch, tri} : Shape{tri};
  if (ls != (batched ? Shape{batch, c} : Shape{c}) || sign.size() != c) {
    throw ConfigError("lu_compose: log_scale " + shape_string(ls) + " does not match " + std::to_string(c) +
                      " channels");
  }
  if (tri > 0 && (lower.shape() != tri_shape || upper.shape() != tri_shape)) {
    throw ConfigError("lu_compose: triangular entries must have shape " + shape_string(tri_shape));
  }
  Tensor<T> w(batched ? Shape{batch, c, c} : Shape{c, c});
  for (std::size_t n = 0; n < batch; ++n) {
    auto f = unpack_lu<T>(c, lower.value().data().data() + n * tri, upper.value().data().data() + n * tri,
                          log_scale.value().data().data() + n * c, sign);
    T* wn = w.data().data() + n * c * c;
    for (std::size_t r = 0; r < c; ++r) {
      const std::size_t src = perm[r];
      for (std::size_t j = 0; j < c; ++j) {
        T s = 0;
        for (std::size_t k = 0; k <= std::min(src, j); ++k) s += f.lower[src * c + k] * f.upper[k * c + j];
        wn[r * c + j] = s;
      }
    }
  }
  return lower.tape().record(
      "lu_compose", std::move(w), {lower, upper, log_scale}, [c, tri, batch, perm, sign](BackwardContext<T>& ctx) {
        const auto& g = ctx.grad_output();
        for (std::size_t n = 0; n < batch; ++n) {
          auto f = unpack_lu<T>(c, ctx.input(0).data().data() + n * tri, ctx.input(1).data().data() + n * tri,
                                ctx.input(2).data().data() + n * c, sign);
          // dM = P^T dW, i.e. row perm[r] of dM is row r of dW.
          std::vector<T> dm(c * c);
          for (std::size_t r = 0; r < c; ++r)
            for (std::size_t j = 0; j < c; ++j) dm[perm[r] * c + j] = g[n * c * c + r * c + j];
          if (ctx.needs_grad(0) && tri > 0) {
            auto& gl = ctx.grad_input(0);
            std::size_t li = 0;
            for (std::size_t i = 0; i < c; ++i)
              for (std::size_t j = 0; j < i; ++j) {
                T s = 0;  // (dM U^T)[i][j]
                for (std::size_t k = j; k < c; ++k) s += dm[i * c + k] * f.upper[j * c + k];
                gl[n * tri + li++] += s;
              }
          }
          const bool need_u = ctx.needs_grad(1) && tri > 0;
          const bool need_s = ctx.needs_grad(2);
          if (!need_u && !need_s) continue;
          std::size_t ui = 0;
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = i; j < c; ++j) {
              T s = 0;  // (L^T dM)[i][j]
              for (std::size_t k = i; k < c; ++k) s += f.lower[k * c + i] * dm[k * c + j];
              if (j == i) {
                if (need_s) ctx.grad_input(2)[n * c + i] += s * f.upper[i * c + i];
              } else {
                if (need_u) ctx.grad_input(1)[n * tri + ui] += s;
                ++ui;
              }
            }
        }
      });
}

template <typename T>
Var<T> squeeze2(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ConfigError("squeeze: expected N x C x H x W, got " + shape_string(s));
  if (s[2] % 2 || s[3] % 2) throw ConfigError("squeeze: spatial dims must be even, got " + shape_string(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t ho = h / 2, wo = w / 2;
  // map[i] = source index of output element i
  std::vector<std::size_t> map(x.value().size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const std::size_t out = (((b * 4 * c) + 4 * ch + q) * ho + i) * wo + j;
            map[out] = ((b * c + ch) * h + 2 * i + q / 2) * w + 2 * j + q % 2;
          }
  Tensor<T> y(Shape{n, 4 * c, ho, wo});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < map.size(); ++i) y[i] = xv[map[i]];
  return x.tape().record("squeeze", std::move(y), {x}, [map = std::move(map)](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
  });
}

template <typename T>
Var<T> unsqueeze2(Var<T> x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] % 4) throw ConfigError("unsqueeze: channel count must be a multiple of 4");
  const std::size_t n = s[0], c = s[1] / 4, ho = s[2], wo = s[3];
  const std::size_t h = 2 * ho, w = 2 * wo;
  // map[i] = source index (in the squeezed tensor) of output element i
  std::vector<std::size_t> map(x.value().size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const std::size_t squeezed = (((b * 4 * c) + 4 * ch + q) * ho + i) * wo + j;
            map[((b * c + ch) * h + 2 * i + q / 2) * w + 2 * j + q % 2] = squeezed;
          }
  Tensor<T> y(Shape{n, c, h, w});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < map.size(); ++i) y[i] = xv[map[i]];
  return x.tape().record("unsqueeze", std::move(y), {x}, [map = std::move(map)](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += g[i];
  });
}

template <typename T>
Var<T> gaussian_logp(Var<T> z) {
  const auto& zv = z.value();
  if (zv.rank() < 1) throw ConfigError("gaussian_logp: expected {N, ...}");
  const std::size_t n = zv.dim(0), inner = zv.size() / n;
  const T half_log_2pi = T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
  Tensor<T> y(Shape{n});
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::size_t i = 0; i < inner; ++i) acc += zv[s * inner + i] * zv[s * inner + i];
    y[s] = T(-0.5) * acc - half_log_2pi * static_cast<T>(inner);
  }
  return z.tape().record("gaussian_logp", std::move(y), {z}, [n, inner](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& zv = ctx.input(0);
    auto& gz = ctx.grad_input(0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < inner; ++i) gz[s * inner + i] -= g[s] * zv[s * inner + i];
  });
}

#define FULLGLOW_INSTANTIATE(T)                                                                              \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> div<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> scale<T>(Var<T>, T);                                                                       \
  template Var<T> add_scalar<T>(Var<T>, T);                                                                  \
  template Var<T> exp<T>(Var<T>);                                                                            \
  template Var<T> log<T>(Var<T>);                                                                            \
  template Var<T> square<T>(Var<T>);                                                                         \
  template Var<T> sigmoid<T>(Var<T>);                                                                        \
  template Var<T> log_sigmoid<T>(Var<T>);                                                                    \
  template Var<T> relu<T>(Var<T>);                                                                           \
  template Var<T> sum<T>(Var<T>);                                                                            \
  template Var<T> mean<T>(Var<T>);                                                                           \
  template Var<T> sum_per_sample<T>(Var<T>);                                                                 \
  template Var<T> broadcast<T>(Var<T>, std::size_t);                                                         \
  template Var<T> reshape<T>(Var<T>, Shape);                                                                 \
  template Var<T> flatten<T>(Var<T>);                                                                        \
  template Var<T> slice_channels<T>(Var<T>, std::size_t, std::size_t);                                       \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                            \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                               \
  template Var<T> dense<T>(Var<T>, Var<T>, Var<T>);                                                          \
  template Var<T> channel_affine<T>(Var<T>, Var<T>, Var<T>);                                                 \
  template Var<T> channel_mix<T>(Var<T>, Var<T>);                                                            \
  template Var<T> lu_compose<T>(Var<T>, Var<T>, Var<T>, const std::vector<std::size_t>&, const std::vector<T>&); \
  template Var<T> squeeze2<T>(Var<T>);                                                                       \
  template Var<T> unsqueeze2<T>(Var<T>);                                                                     \
  template Var<T> gaussian_logp<T>(Var<T>);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow::ops

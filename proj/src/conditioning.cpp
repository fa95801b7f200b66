#include "fullglow/conditioning.hpp"

namespace fullglow {

std::mt19937_64 module_rng(std::uint64_t seed, const std::string& name) {
  // FNV-1a over the module name, mixed with the model seed.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& v : t.data()) v = static_cast<T>(normal(rng));
}

}  // namespace

template <typename T>
ConvLayer<T>::ConvLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel)
    : weight{name + ".weight", Tensor<T>(Shape{out, in, kernel, kernel}), {}},
      bias{name + ".bias", Tensor<T>(Shape{out}), {}},
      padding((kernel - 1) / 2) {}

template <typename T>
Var<T> ConvLayer<T>::operator()(Var<T> x) {
  Tape<T>& tape = x.tape();
  return ops::conv2d(x, tape.parameter(weight), tape.parameter(bias), 1, padding);
}

template <typename T>
DenseLayer<T>::DenseLayer(const std::string& name, std::size_t in, std::size_t out)
    : weight{name + ".weight", Tensor<T>(Shape{out, in}), {}}, bias{name + ".bias", Tensor<T>(Shape{out}), {}} {}

template <typename T>
Var<T> DenseLayer<T>::operator()(Var<T> x) {
  Tape<T>& tape = x.tape();
  return ops::dense(x, tape.parameter(weight), tape.parameter(bias));
}

template <typename T>
TrunkCN<T>::TrunkCN(const std::string& name, std::size_t in_channels, std::size_t height, std::size_t width,
                    std::size_t out_dim)
    : in_channels_(in_channels), height_(height), width_(width), out_dim_(out_dim) {
  const std::size_t kernels[3] = {1, 3, 3};
  std::size_t in = in_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    conv_[i] = ConvLayer<T>(name + ".conv" + std::to_string(i), in, kConvWidths[i], kernels[i]);
    in = kConvWidths[i];
  }
  in = kConvWidths[2] * height * width;
  for (std::size_t i = 0; i < 3; ++i) {
    dense_[i] = DenseLayer<T>(name + ".dense" + std::to_string(i), in, kDenseWidths[i]);
    in = kDenseWidths[i];
  }
  dense_[3] = DenseLayer<T>(name + ".dense3", in, out_dim);
}

template <typename T>
Var<T> TrunkCN<T>::operator()(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != in_channels_ || s[2] != height_ || s[3] != width_) {
    throw ConfigError("TrunkCN: expected N x " + std::to_string(in_channels_) + " x " + std::to_string(height_) +
                      " x " + std::to_string(width_) + ", got " + shape_string(s));
  }
  Var<T> h = x;
  for (auto& conv : conv_) h = ops::relu(conv(h));
  h = ops::flatten(h);
  for (std::size_t i = 0; i < 3; ++i) h = ops::relu(dense_[i](h));
  return dense_[3](h);
}

template <typename T>
void TrunkCN<T>::init_hidden(std::mt19937_64& rng, double scale) {
  for (auto& conv : conv_) {
    fill_normal(conv.weight.value, rng, scale);
    fill_normal(conv.bias.value, rng, scale);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    fill_normal(dense_[i].weight.value, rng, scale);
    fill_normal(dense_[i].bias.value, rng, scale);
  }
}

template <typename T>
void TrunkCN<T>::set_constant_output(const std::vector<T>& bias) {
  if (bias.size() != out_dim_) {
    throw ConfigError("TrunkCN: output bias needs " + std::to_string(out_dim_) + " values, got " +
                      std::to_string(bias.size()));
  }
  dense_[3].weight.value.fill(T(0));
  dense_[3].bias.value = Tensor<T>(Shape{out_dim_}, bias);
}

template <typename T>
std::vector<Parameter<T>*> TrunkCN<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& conv : conv_) {
    out.push_back(&conv.weight);
    out.push_back(&conv.bias);
  }
  for (auto& d : dense_) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  return out;
}

template <typename T>
CouplingCN<T>::CouplingCN(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                          std::size_t hidden)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      hidden_(name + ".conv0", in_channels, hidden, 3),
      output_(name + ".conv1", hidden, out_channels, 3) {
  if (out_channels % 2) throw ConfigError("CouplingCN: output channels must be even");
}

template <typename T>
std::pair<Var<T>, Var<T>> CouplingCN<T>::operator()(Var<T> input) {
  if (input.shape().size() != 4 || input.shape()[1] != in_channels_) {
    throw ConfigError("CouplingCN: expected " + std::to_string(in_channels_) + " input channels, got " +
                      shape_string(input.shape()));
  }
  Var<T> out = output_(ops::relu(hidden_(input)));
  const std::size_t half = out_channels_ / 2;
  return {ops::slice_channels(out, 0, half), ops::slice_channels(out, half, out_channels_)};
}

template <typename T>
void CouplingCN<T>::init(std::mt19937_64& rng, double scale) {
  fill_normal(hidden_.weight.value, rng, scale);
  fill_normal(hidden_.bias.value, rng, scale);
  output_.weight.value.fill(T(0));
  output_.bias.value.fill(T(0));
}

template <typename T>
std::vector<Parameter<T>*> CouplingCN<T>::parameters() {
  return {&hidden_.weight, &hidden_.bias, &output_.weight, &output_.bias};
}

template <typename T>
ConditionalActnorm<T> cn_actnorm(TrunkCN<T>& net, Var<T> source_act, std::size_t channels) {
  if (net.out_dim() != 2 * channels) {
    throw ConfigError("cn_actnorm: network emits " + std::to_string(net.out_dim()) + " values, need " +
                      std::to_string(2 * channels));
  }
  Var<T> out = net(source_act);
  return {ops::slice_channels(out, 0, channels), ops::slice_channels(out, channels, 2 * channels)};
}

template <typename T>
ConditionalInvConv<T> cn_invconv(TrunkCN<T>& net, Var<T> source_act, std::size_t channels) {
  if (net.out_dim() != channels * channels) {
    throw ConfigError("cn_invconv: network emits " + std::to_string(net.out_dim()) + " values, need " +
                      std::to_string(channels * channels));
  }
  const std::size_t tri = channels * (channels - 1) / 2;
  Var<T> out = net(source_act);
  return {ops::slice_channels(out, 0, tri), ops::slice_channels(out, tri, 2 * tri),
          ops::slice_channels(out, 2 * tri, 2 * tri + channels)};
}

template <typename T>
std::pair<Var<T>, Var<T>> cn_coupling(CouplingCN<T>& net, Var<T> x2_target, Var<T> source_coupling_out,
                                      const Var<T>* boundary) {
  const Shape& a = x2_target.shape();
  const Shape& b = source_coupling_out.shape();
  if (a.size() != 4 || b.size() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3]) {
    throw ConfigError("cn_coupling: spatial mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  std::vector<Var<T>> parts{x2_target, source_coupling_out};
  if (boundary) parts.push_back(*boundary);
  return net(ops::concat_channels(parts));
}

template <typename T>
std::vector<T> pack_invconv(const InvConvParams<T>& p) {
  std::vector<T> out;
  if (p.channels() > 1) {
    out.insert(out.end(), p.lower.data().begin(), p.lower.data().end());
    out.insert(out.end(), p.upper.data().begin(), p.upper.data().end());
  }
  out.insert(out.end(), p.log_scale.data().begin(), p.log_scale.data().end());
  return out;
}

template <typename T>
void unpack_invconv(const std::vector<T>& packed, InvConvParams<T>& p) {
  const std::size_t c = p.channels();
  const std::size_t tri = c * (c - 1) / 2;
  if (packed.size() != c * c) throw ConfigError("unpack_invconv: expected C^2 values");
  auto at = [&](std::size_t begin, std::size_t len) {
    return std::vector<T>(packed.begin() + static_cast<std::ptrdiff_t>(begin),
                          packed.begin() + static_cast<std::ptrdiff_t>(begin + len));
  };
  if (tri > 0) {
    p.lower = Tensor<T>(Shape{tri}, at(0, tri));
    p.upper = Tensor<T>(Shape{tri}, at(tri, tri));
  }
  p.log_scale = Tensor<T>(Shape{c}, at(2 * tri, c));
}

template <typename T>
void init_conditional_actnorm(TrunkCN<T>& net, const Tensor<T>& first_batch_source,
                              const Tensor<T>& first_batch_target) {
  const Shape& s = first_batch_source.shape();
  const Shape& t = first_batch_target.shape();
  if (s.size() != 4 || t.size() != 4 || s[0] != t[0] || s[2] != t[2] || s[3] != t[3]) {
    throw ConfigError("init_conditional_actnorm: source " + shape_string(s) + " and target " + shape_string(t) +
                      " batches do not pair up");
  }
  const ActnormParams<T> p = actnorm_data_init(first_batch_target);
  std::vector<T> bias(p.log_scale.data().begin(), p.log_scale.data().end());
  bias.insert(bias.end(), p.shift.data().begin(), p.shift.data().end());
  net.set_constant_output(bias);
}

template <typename T>
InvConvParams<T> init_conditional_invconv(TrunkCN<T>& net, std::size_t channels, std::mt19937_64& rng) {
  InvConvParams<T> p = random_rotation_lu<T>(channels, rng);
  net.set_constant_output(pack_invconv(p));
  return p;
}

template <typename T>
void init_coupling_cn(CouplingCN<T>& net, std::mt19937_64& rng, double scale) {
  net.init(rng, scale);
}

#define FULLGLOW_INSTANTIATE(T)                                                                               \
  template struct ConvLayer<T>;                                                                                \
  template struct DenseLayer<T>;                                                                               \
  template class TrunkCN<T>;                                                                                   \
  template class CouplingCN<T>;                                                                                \
  template ConditionalActnorm<T> cn_actnorm<T>(TrunkCN<T>&, Var<T>, std::size_t);                              \
  template ConditionalInvConv<T> cn_invconv<T>(TrunkCN<T>&, Var<T>, std::size_t);                              \
  template std::pair<Var<T>, Var<T>> cn_coupling<T>(CouplingCN<T>&, Var<T>, Var<T>, const Var<T>*);            \
  template std::vector<T> pack_invconv<T>(const InvConvParams<T>&);                                            \
  template void unpack_invconv<T>(const std::vector<T>&, InvConvParams<T>&);                                   \
  template void init_conditional_actnorm<T>(TrunkCN<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template InvConvParams<T> init_conditional_invconv<T>(TrunkCN<T>&, std::size_t, std::mt19937_64&);           \
  template void init_coupling_cn<T>(CouplingCN<T>&, std::mt19937_64&, double);

FULLGLOW_INSTANTIATE(float)
FULLGLOW_INSTANTIATE(double)
#undef FULLGLOW_INSTANTIATE

}  // namespace fullglow

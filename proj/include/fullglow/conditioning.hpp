#pragma once

// Conditioning networks (CNs) that generate target-side flow parameters from
// source-side activations.
//
//   TrunkCN:    conv1x1(->8) conv3x3(->4) conv3x3(->2) flatten dense(32) dense(64)
//               dense(48) dense(out_dim), ReLU between layers, linear output.
//               out_dim = 2C for actnorm, C^2 for the 1x1 convolution.
//   CouplingCN: conv3x3(->hidden) ReLU conv3x3(->C), final layer zero-initialized.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fullglow/flow_layers.hpp"

namespace fullglow {

/// Deterministic per-module generator: same (seed, name) -> same stream,
/// independent of which other modules exist.
std::mt19937_64 module_rng(std::uint64_t seed, const std::string& name);

template <typename T>
struct ConvLayer {
  Parameter<T> weight;  // out x in x k x k
  Parameter<T> bias;    // out
  std::size_t padding = 0;

  ConvLayer() = default;
  ConvLayer(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel);
  Var<T> operator()(Var<T> x);
};

template <typename T>
struct DenseLayer {
  Parameter<T> weight;  // out x in
  Parameter<T> bias;    // out

  DenseLayer() = default;
  DenseLayer(const std::string& name, std::size_t in, std::size_t out);
  Var<T> operator()(Var<T> x);
};

template <typename T>
class TrunkCN {
 public:
  static constexpr std::size_t kConvWidths[3] = {8, 4, 2};
  static constexpr std::size_t kDenseWidths[3] = {32, 64, 48};

  TrunkCN() = default;
  TrunkCN(const std::string& name, std::size_t in_channels, std::size_t height, std::size_t width,
          std::size_t out_dim);

  /// x: N x in_channels x H x W -> {N, out_dim}.
  Var<T> operator()(Var<T> x);

  /// Small random weights and biases (normal, stddev `scale`) on every layer but the last.
  void init_hidden(std::mt19937_64& rng, double scale);
  /// Output layer weights := 0, bias := `bias`. The CN then emits `bias` for every input.
  void set_constant_output(const std::vector<T>& bias);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_dim() const { return out_dim_; }
  std::vector<Parameter<T>*> parameters();
  DenseLayer<T>& output_layer() { return dense_[3]; }

 private:
  std::size_t in_channels_ = 0, height_ = 0, width_ = 0, out_dim_ = 0;
  ConvLayer<T> conv_[3];
  DenseLayer<T> dense_[4];
};

template <typename T>
class CouplingCN {
 public:
  CouplingCN() = default;
  CouplingCN(const std::string& name, std::size_t in_channels, std::size_t out_channels, std::size_t hidden);

  /// input: channel-wise concatenation of all conditioning inputs.
  /// Returns (o1, o2), each N x out/2 x H x W.
  std::pair<Var<T>, Var<T>> operator()(Var<T> input);

  /// Hidden conv gets small random values; the final conv is zeroed so the
  /// coupling starts at s = sigmoid(2), t = 0.
  void init(std::mt19937_64& rng, double scale);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  std::vector<Parameter<T>*> parameters();

 private:
  std::size_t in_channels_ = 0, out_channels_ = 0;
  ConvLayer<T> hidden_;
  ConvLayer<T> output_;
};

// --- parameter generation for each conditional sub-step -------------------

template <typename T>
struct ConditionalActnorm {
  Var<T> log_scale;  // {N, C}
  Var<T> shift;      // {N, C}
};

template <typename T>
struct ConditionalInvConv {
  Var<T> lower;      // {N, C(C-1)/2}
  Var<T> upper;      // {N, C(C-1)/2}
  Var<T> log_scale;  // {N, C}
};

/// `source_act` may already carry extra side channels (boundary map).
template <typename T>
ConditionalActnorm<T> cn_actnorm(TrunkCN<T>& net, Var<T> source_act, std::size_t channels);

template <typename T>
ConditionalInvConv<T> cn_invconv(TrunkCN<T>& net, Var<T> source_act, std::size_t channels);

/// Concatenates x2, the source coupling output and the optional boundary map.
template <typename T>
std::pair<Var<T>, Var<T>> cn_coupling(CouplingCN<T>& net, Var<T> x2_target, Var<T> source_coupling_out,
                                      const Var<T>* boundary);

/// Packing of the C^2 1x1-convolution vector: [lower | upper | log_scale].
template <typename T>
std::vector<T> pack_invconv(const InvConvParams<T>& p);
template <typename T>
void unpack_invconv(const std::vector<T>& packed, InvConvParams<T>& p);

// --- initialization -------------------------------------------------------

/// Zero output weights and a bias that standardizes `first_batch_target` per channel.
template <typename T>
void init_conditional_actnorm(TrunkCN<T>& net, const Tensor<T>& first_batch_source,
                              const Tensor<T>& first_batch_target);

/// Samples a rotation, zeroes the output weights and packs its LU factors into
/// the bias. Returns the factorization; its perm and sign must stay frozen.
template <typename T>
InvConvParams<T> init_conditional_invconv(TrunkCN<T>& net, std::size_t channels, std::mt19937_64& rng);

template <typename T>
void init_coupling_cn(CouplingCN<T>& net, std::mt19937_64& rng, double scale = 0.05);

}  // namespace fullglow

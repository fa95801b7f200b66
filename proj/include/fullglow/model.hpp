#pragma once

// Dual-stack conditional flow. A source Glow over segmentation images runs
// unconditionally; every actnorm / 1x1 convolution / coupling of the target
// Glow gets its parameters from conditioning networks that read the output of
// the matching sub-step in the source Glow.
//
// Both stacks share one layout: per block, squeeze -> n_flows steps -> split
// (no split after the last block). One "segment" is one flow step of both
// stacks plus the block plumbing around it; training and gradient
// checkpointing both walk the model segment by segment.

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fullglow/conditioning.hpp"
#include "fullglow/data.hpp"

namespace fullglow {

enum class ConditioningMode { full, coupling_only, unconditional };

std::string to_string(ConditioningMode mode);
ConditioningMode parse_conditioning_mode(const std::string& text);
std::string to_string(BoundaryMode mode);
BoundaryMode parse_boundary_mode(const std::string& text);

struct ModelConfig {
  std::size_t n_blocks = 4;
  std::size_t n_flows = 16;
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  double lambda = 1e-4;
  ConditioningMode conditioning = ConditioningMode::full;
  bool use_boundary = false;
  BoundaryMode boundary_mode = BoundaryMode::bilinear;
  double temperature = 0.7;
  std::size_t coupling_hidden = 128;
  double hidden_init_scale = 0.05;
  std::uint64_t seed = 0;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  /// Element count of one image.
  std::size_t dims() const { return in_channels * image_size * image_size; }
};

template <typename T>
struct StepActivations {
  Var<T> actnorm;   // post-actnorm
  Var<T> invconv;   // post-1x1 convolution
  Var<T> coupling;  // post-coupling (step output)
};

template <typename T>
struct StepCondition {
  const StepActivations<T>* source = nullptr;
  const Var<T>* boundary = nullptr;  // N x 1 x h x w at this block's resolution
};

template <typename T>
struct StepResult {
  Var<T> y;
  Var<T> logdet;  // {N}
  StepActivations<T> activations;
};

/// One actnorm -> 1x1 convolution -> coupling unit. Each sub-step is either a
/// plain learned layer or a CN-generated one.
template <typename T>
class FlowStep {
 public:
  struct Layout {
    std::size_t channels = 0, height = 0, width = 0;
    std::size_t hidden = 128;
    bool conditional_actnorm = false;
    bool conditional_invconv = false;
    bool conditional_coupling = false;
    bool boundary = false;
  };

  FlowStep(std::string name, const Layout& layout, std::uint64_t seed, double init_scale);

  /// With `initialize`, actnorm parameters (or the actnorm CN bias) are first
  /// set from the statistics of `x`.
  StepResult<T> forward(Var<T> x, const StepCondition<T>& cond, bool initialize);
  Var<T> inverse(Var<T> y, const StepCondition<T>& cond);

  const std::string& name() const { return name_; }
  const Layout& layout() const { return layout_; }
  std::vector<Parameter<T>*> parameters();
  /// Frozen state (1x1 permutation and signs), stored as reals.
  std::vector<std::pair<std::string, Tensor<T>>> buffers() const;
  void set_buffer(const std::string& name, const Tensor<T>& value);

  TrunkCN<T>& actnorm_cn() { return actnorm_cn_; }
  TrunkCN<T>& invconv_cn() { return invconv_cn_; }
  CouplingCN<T>& coupling_net() { return coupling_; }

 private:
  Var<T> side_input(Var<T> source, const StepCondition<T>& cond) const;
  std::pair<Var<T>, Var<T>> coupling_params(Var<T> x2, const StepCondition<T>& cond);
  void require_condition(const StepCondition<T>& cond) const;

  std::string name_;
  Layout layout_;
  Parameter<T> actnorm_log_scale_, actnorm_shift_;
  TrunkCN<T> actnorm_cn_;
  std::vector<std::size_t> perm_;
  std::vector<T> sign_;
  Parameter<T> invconv_lower_, invconv_upper_, invconv_log_scale_;
  TrunkCN<T> invconv_cn_;
  CouplingCN<T> coupling_;
};

/// Source activations for every step plus per-block boundary maps, as tape variables.
template <typename T>
struct ActivationCache {
  std::vector<StepActivations<T>> steps;
  std::vector<Var<T>> boundary;  // one per block when boundary maps are in use
};

/// Tape-independent copy of an ActivationCache; bind() re-creates it on a tape.
template <typename T>
struct CachedCondition {
  std::vector<std::array<Tensor<T>, 3>> steps;
  std::vector<Tensor<T>> boundary;

  ActivationCache<T> bind(Tape<T>& tape) const;
  static CachedCondition capture(const ActivationCache<T>& cache);
};

template <typename T>
struct StackState {
  Var<T> h;
  Var<T> logp;  // {N}: running log-density (logdets plus factored-out priors)
};

template <typename T>
struct JointState {
  StackState<T> source;
  StackState<T> target;
};

template <typename T>
struct SourceEncoding {
  LatentPyramid<T> z;
  Tensor<T> logp;  // {N}
  CachedCondition<T> cache;
};

template <typename T>
struct TargetEncoding {
  LatentPyramid<T> z;
  Tensor<T> logp;  // {N}
};

template <typename T>
class FullGlow {
 public:
  explicit FullGlow(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t segment_count() const { return config_.n_blocks * config_.n_flows; }
  /// Latent chunk shapes for a batch of `batch` images.
  std::vector<Shape> pyramid_shapes(std::size_t batch) const;

  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }
  /// Data-dependent initialization of every actnorm (plain and conditional).
  void initialize(const Tensor<T>& x_a, const Tensor<T>& x_b, const Tensor<T>* boundary = nullptr);

  // --- tape-level passes --------------------------------------------------

  /// Per-block boundary maps for a full-resolution N x 1 x H x W map.
  std::vector<Tensor<T>> boundary_pyramid(const Tensor<T>* boundary) const;

  /// Runs segment `index` of one stack. Appends a latent chunk when the
  /// segment closes a block. Returns the step's sub-step activations.
  StepActivations<T> stack_segment(bool target, std::size_t index, StackState<T>& state,
                                   const StepCondition<T>& cond, bool initialize, std::vector<Var<T>>* latents);
  void stack_segment_inverse(bool target, std::size_t index, Var<T>& h, const std::vector<Var<T>>& latents,
                             const StepCondition<T>& cond);

  /// One segment of both stacks (the unit of gradient checkpointing).
  void joint_segment(std::size_t index, JointState<T>& state, const std::vector<Tensor<T>>& boundary,
                     bool initialize);
  /// Training objective mean(-lambda * logp_a - logp_b|a) from a finished state.
  Var<T> objective(const JointState<T>& state, double lambda) const;
  JointState<T> initial_state(Tape<T>& tape, const Tensor<T>& x_a, const Tensor<T>& x_b) const;

  struct SourcePass {
    std::vector<Var<T>> latents;
    Var<T> logp;
    ActivationCache<T> cache;
  };
  struct TargetPass {
    std::vector<Var<T>> latents;
    Var<T> logp;
  };
  SourcePass source_forward(Var<T> x_a, const Tensor<T>* boundary);
  TargetPass target_forward(Var<T> x_b, const ActivationCache<T>& cache);
  Var<T> target_inverse(const std::vector<Var<T>>& latents, const ActivationCache<T>& cache);
  Var<T> source_inverse(const std::vector<Var<T>>& latents);

  // --- tensor-level API (no gradients) ------------------------------------

  SourceEncoding<T> source_forward(const Tensor<T>& x_a, const Tensor<T>* boundary = nullptr);
  TargetEncoding<T> target_forward(const Tensor<T>& x_b, const CachedCondition<T>& cache);
  Tensor<T> target_inverse(const LatentPyramid<T>& z, const CachedCondition<T>& cache);
  Tensor<T> source_inverse(const LatentPyramid<T>& z);

  /// Objective value for a batch (no gradients).
  double loss(const Tensor<T>& x_a, const Tensor<T>& x_b, double lambda, const Tensor<T>* boundary = nullptr);
  /// Mean conditional bits per dimension, -log2 p(x_b | x_a) / D_b.
  double bpd(const Tensor<T>& x_b, const Tensor<T>& x_a, const Tensor<T>* boundary = nullptr);
  /// x_b ~ p(. | x_a) with every latent drawn from N(0, temperature^2).
  Tensor<T> sample(const Tensor<T>& x_a, double temperature, std::mt19937_64& rng,
                   const Tensor<T>* boundary = nullptr);
  /// Encode x_b1 against x_a1, decode against x_a2.
  Tensor<T> content_transfer(const Tensor<T>& x_a1, const Tensor<T>& x_b1, const Tensor<T>& x_a2,
                             const Tensor<T>* boundary1 = nullptr, const Tensor<T>* boundary2 = nullptr);

  // --- parameters -----------------------------------------------------------

  std::vector<Parameter<T>*> parameters();
  std::vector<Parameter<T>*> source_parameters();
  std::vector<Parameter<T>*> target_parameters();
  std::vector<std::pair<std::string, Tensor<T>>> buffers() const;
  void set_buffer(const std::string& name, const Tensor<T>& value);
  void zero_grad();

  FlowStep<T>& step(bool target, std::size_t index) { return (target ? target_ : source_)[index]; }

 private:
  std::size_t block_of(std::size_t index) const { return index / config_.n_flows; }
  std::size_t step_of(std::size_t index) const { return index % config_.n_flows; }
  void check_image(const Shape& shape, const char* what) const;

  ModelConfig config_;
  std::vector<FlowStep<T>> source_;
  std::vector<FlowStep<T>> target_;
  bool initialized_ = false;
};

}  // namespace fullglow

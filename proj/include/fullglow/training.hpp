#pragma once

// Optimisation loop, checkpointed recomputation and model persistence.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fullglow/adam.hpp"
#include "fullglow/data.hpp"
#include "fullglow/model.hpp"

namespace fullglow {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 1;
  std::size_t init_batch_size = 16;  // images used for data-dependent init
  std::size_t iterations = 2000;
  std::size_t checkpoint_interval = 500;
  double lambda = 1e-4;
  bool checkpointing = false;
  bool linear_decay = false;  // lr falls linearly to zero over the budget
  std::uint64_t seed = 0;

  void validate() const;
};

struct GradientReport {
  double loss = 0.0;
  double logp_source = 0.0;  // batch means, nats
  double logp_target = 0.0;
  /// Tensors kept alive between forward and backward: every tape node for
  /// the plain pass, only the segment-boundary states when checkpointing.
  std::size_t stored_tensors = 0;
  std::size_t stored_elements = 0;
  /// Largest single tape recorded during the pass.
  std::size_t peak_tape_elements = 0;
};

/// Evaluates the objective on one batch and adds its gradient to every
/// Parameter::grad (callers zero them first). With `checkpointing`, forward
/// keeps only the joint state between flow steps and backward recomputes
/// each step on its own tape.
template <typename T>
GradientReport loss_and_gradients(FullGlow<T>& model, const Tensor<T>& x_a, const Tensor<T>& x_b, double lambda,
                                  bool checkpointing, const Tensor<T>* boundary = nullptr);

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double bpd_source = 0.0;
  double bpd_target = 0.0;
};

template <typename T>
struct TrainState {
  AdamState<T> adam;
  std::size_t iteration = 0;  // iterations completed
};

template <typename T>
struct Batch {
  Tensor<T> source;
  Tensor<T> target;
  Tensor<T> boundary;  // empty unless the model uses boundary maps
};

/// The dequantized batch drawn at `iteration`. Depends only on (seed, iteration),
/// so interrupted and uninterrupted runs see the same data.
template <typename T>
Batch<T> training_batch(const std::vector<PairedSample>& data, const TrainConfig& config, bool with_boundary,
                        std::size_t iteration);
/// The batch used for data-dependent initialization (init_batch_size images).
template <typename T>
Batch<T> initialization_batch(const std::vector<PairedSample>& data, const TrainConfig& config, bool with_boundary);

/// Dequantized tensors for one sample with a fixed noise seed (evaluation).
template <typename T>
Batch<T> evaluation_batch(const PairedSample& sample, bool with_boundary, std::uint64_t seed);

template <typename T>
struct TrainHooks {
  std::function<void(const LossRecord&)> on_record;
  /// Called every checkpoint_interval iterations and at the end of the budget.
  std::function<void(const FullGlow<T>&, const TrainState<T>&)> on_checkpoint;
};

/// Runs iterations state.iteration .. config.iterations-1. An uninitialized
/// model is first data-initialized on initialization_batch(). A non-finite loss aborts with a
/// NumericalError carrying the iteration index and the last finite loss.
template <typename T>
std::vector<LossRecord> train(FullGlow<T>& model, TrainState<T>& state, const std::vector<PairedSample>& data,
                              const TrainConfig& config, const TrainHooks<T>& hooks = {});

/// Mean conditional bpd over `data`, dequantization noise seeded per sample.
template <typename T>
double mean_bpd(FullGlow<T>& model, const std::vector<PairedSample>& data, std::uint64_t seed);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace);

// --- checkpoint files -------------------------------------------------------
//
// "FGLW", u32 version, u32 length + model config text, u64 iteration,
// f64 beta1/beta2/epsilon, u64 adam step, u32 entry count, then entries:
// u8 kind (0 parameter, 1 buffer, 2 first moment, 3 second moment),
// u32 length + name, u32 rank, u32 dims, little-endian f32 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct LoadedCheckpoint {
  FullGlow<T> model;
  TrainState<T> state;
};

template <typename T>
std::string encode_checkpoint(const FullGlow<T>& model, const TrainState<T>& state);
template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::string& bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const FullGlow<T>& model, const TrainState<T>& state);
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace fullglow

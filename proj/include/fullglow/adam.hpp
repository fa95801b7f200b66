#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fullglow/autodiff.hpp"

namespace fullglow {

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
};

/// One bias-corrected Adam update using Parameter::grad. Moments are created
/// on the first call; afterwards their shapes must keep matching the parameters.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw UsageError("adam_step: learning rate must be positive");
  if (state.first_moment.empty() && state.step == 0) {
    for (auto* p : params) {
      state.first_moment.push_back(Tensor<T>::zeros(p->value.shape()));
      state.second_moment.push_back(Tensor<T>::zeros(p->value.shape()));
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw UsageError("adam_step: state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = *params[i];
    if (state.first_moment[i].shape() != p.value.shape() || (!p.grad.empty() && p.grad.shape() != p.value.shape())) {
      throw UsageError("adam_step: shape mismatch for " + p.name);
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (p.grad.empty()) p.zero_grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / correction1) / (std::sqrt(vk / correction2) + state.epsilon);
      p.value[k] = static_cast<T>(p.value[k] - update);
    }
  }
}

}  // namespace fullglow

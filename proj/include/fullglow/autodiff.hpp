#pragma once

// Reverse-mode differentiation over a linear tape.
//
// A Tape owns every value computed through it. Node ids are assigned in
// recording order, which is already a topological order, so backward() is a
// single reverse sweep. A tape is a single-threaded unit of work; distinct
// tapes share nothing and may live on distinct threads.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fullglow/tensor.hpp"

namespace fullglow {

template <typename T>
class Tape;

/// A trainable tensor that outlives tapes. Tapes accumulate into `grad`.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>::zeros(value.shape()); }
};

/// Handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class BackwardContext {
 public:
  BackwardContext(Tape<T>& tape, std::size_t node) : tape_(tape), node_(node) {}

  const Tensor<T>& grad_output() const;
  const Tensor<T>& output() const;
  const Tensor<T>& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Zero-initialized on first access; rules must add into it, never assign.
  Tensor<T>& grad_input(std::size_t i);

 private:
  Tape<T>& tape_;
  std::size_t node_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> value);
  /// Differentiable leaf (a plain constant on a no-grad tape).
  Var<T> leaf(Tensor<T> value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var<T> parameter(Parameter<T>& p);

  /// Appends an operation. The rule is dropped when no input needs a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn rule);

  /// Seeds d(loss)/d(loss) = 1 and sweeps once. The loss must be a single element.
  void backward(Var<T> loss);
  /// Vector-Jacobian sweep from several outputs with explicit cotangents.
  void backward(std::span<const Var<T>> outputs, std::span<const Tensor<T>> seeds);

  /// Gradient of a node after backward(); zeros if the sweep never reached it.
  Tensor<T> grad(Var<T> v) const;
  /// Gradients of every differentiable leaf, keyed by node id.
  std::map<std::size_t, Tensor<T>> leaf_gradients() const;
  /// Adds this tape's parameter gradients into Parameter::grad.
  void accumulate_parameter_grads() const;

  std::size_t node_count() const noexcept { return nodes_.size(); }
  /// Total number of scalar values held by the tape (forward activations).
  std::size_t stored_elements() const;

 private:
  friend class Var<T>;
  friend class BackwardContext<T>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn rule;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Tensor<T>& grad_buffer(std::size_t id);
  void sweep();

  bool grad_enabled_;
  bool consumed_ = false;
  // deque: references to earlier values stay valid while recording continues.
  std::deque<Node> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> parameter_nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

}  // namespace fullglow

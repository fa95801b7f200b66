#include "fullglow/autodiff.hpp"

namespace fullglow {

template <typename T>
const Tensor<T>& BackwardContext<T>::grad_output() const {
  return tape_.node(node_).grad;
}

template <typename T>
const Tensor<T>& BackwardContext<T>::output() const {
  return tape_.node(node_).value;
}

template <typename T>
const Tensor<T>& BackwardContext<T>::input(std::size_t i) const {
  return tape_.node(tape_.node(node_).inputs.at(i)).value;
}

template <typename T>
bool BackwardContext<T>::needs_grad(std::size_t i) const {
  return tape_.node(tape_.node(node_).inputs.at(i)).requires_grad;
}

template <typename T>
Tensor<T>& BackwardContext<T>::grad_input(std::size_t i) {
  return tape_.grad_buffer(tape_.node(node_).inputs.at(i));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  if (auto it = parameter_nodes_.find(&p); it != parameter_nodes_.end()) return Var<T>(this, it->second);
  Node n;
  n.op = p.name;
  n.value = p.value;
  n.is_leaf = true;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  parameter_nodes_.emplace(&p, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn rule) {
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const auto& v : inputs) {
      if (&v.tape() != this) throw UsageError(std::string(op) + ": input belongs to a different tape");
      n.requires_grad = n.requires_grad || node(v.id()).requires_grad;
    }
  }
  if (n.requires_grad) {
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) n.inputs.push_back(v.id());
    n.rule = std::move(rule);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.value().size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  Tensor<T> seed(loss.shape(), T(1));
  const Var<T> outputs[] = {loss};
  backward(outputs, std::span<const Tensor<T>>(&seed, 1));
}

template <typename T>
void Tape<T>::backward(std::span<const Var<T>> outputs, std::span<const Tensor<T>> seeds) {
  if (consumed_) throw UsageError("backward: tape already swept; record a new tape per iteration");
  if (outputs.size() != seeds.size()) throw UsageError("backward: one seed per output required");
  consumed_ = true;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (&outputs[i].tape() != this) throw UsageError("backward: output belongs to a different tape");
    if (seeds[i].shape() != outputs[i].shape()) throw UsageError("backward: seed shape mismatch");
    if (!node(outputs[i].id()).requires_grad) continue;
    Tensor<T>& g = grad_buffer(outputs[i].id());
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += seeds[i][k];
  }
  sweep();
}

template <typename T>
void Tape<T>::sweep() {
  for (std::size_t id = nodes_.size(); id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.rule || n.grad.empty()) continue;
    if (!n.grad.all_finite()) throw NumericalError("non-finite gradient", n.op);
    BackwardContext<T> ctx(*this, id);
    n.rule(ctx);
    // Blame the op whose rule produced a non-finite input gradient.
    for (std::size_t in : nodes_[id].inputs) {
      const Node& p = nodes_[in];
      if (p.requires_grad && !p.grad.empty() && !p.grad.all_finite()) {
        throw NumericalError("non-finite gradient", nodes_[id].op);
      }
    }
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = node(v.id());
  if (n.grad.empty()) return Tensor<T>::zeros(n.value.shape());
  return n.grad;
}

template <typename T>
std::map<std::size_t, Tensor<T>> Tape<T>::leaf_gradients() const {
  std::map<std::size_t, Tensor<T>> out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.is_leaf && n.requires_grad) out.emplace(id, n.grad.empty() ? Tensor<T>::zeros(n.value.shape()) : n.grad);
  }
  return out;
}

template <typename T>
void Tape<T>::accumulate_parameter_grads() const {
  for (const auto& [param, id] : parameter_nodes_) {
    if (param->grad.shape() != param->value.shape()) param->zero_grad();
    const Node& n = node(id);
    if (n.grad.empty()) continue;
    for (std::size_t k = 0; k < n.grad.size(); ++k) param->grad[k] += n.grad[k];
  }
}

template <typename T>
std::size_t Tape<T>::stored_elements() const {
  std::size_t total = 0;
  for (const auto& n : nodes_) total += n.value.size();
  return total;
}

template class BackwardContext<float>;
template class BackwardContext<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace fullglow

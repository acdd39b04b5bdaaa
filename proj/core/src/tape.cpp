#include "moco/tape.hpp"

namespace moco {

template <typename T>
Var<T> Tape<T>::constant(Grid<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(const std::string& name, const Grid<T>& value) {
  if (auto it = params_.find(name); it != params_.end()) {
    return Var<T>(this, it->second);
  }
  Node n;
  n.op = "parameter";
  n.value = value;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  params_.emplace(name, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::push(const char* op, Grid<T> value,
                     std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite output");
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (recording_) {
    for (std::size_t in : inputs) {
      if (nodes_.at(in).needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
  }
  if (n.needs_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Grid<T>& Tape<T>::grad_slot(std::size_t id) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  Grid<T>& g = grads_[id];
  if (g.empty()) g = Grid<T>(nodes_[id].value.shape());
  return g;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Grid<T>& grad) {
  if (!nodes_.at(id).needs_grad) return;
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  if (grads_[id].empty()) {
    nodes_[id].value.require_same(grad, nodes_[id].op);
    grads_[id] = grad;
  } else {
    grads_[id] += grad;
  }
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, Grid<T>&& grad) {
  if (!nodes_.at(id).needs_grad) return;
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  if (grads_[id].empty()) {
    nodes_[id].value.require_same(grad, nodes_[id].op);
    grads_[id] = std::move(grad);
  } else {
    grads_[id] += grad;
  }
}

template <typename T>
GradientMap<T> Tape<T>::backward(Var<T> output, const Grid<T>& seed,
                                 const std::vector<std::string>& requested) {
  if (nodes_.empty()) throw ContractError("backward: empty tape");
  if (output.tape() != this) {
    throw ContractError("backward: output belongs to another tape");
  }
  if (backward_done_) {
    throw ContractError("backward: tape has already been differentiated");
  }
  for (const auto& name : requested) {
    if (!params_.count(name)) {
      throw ContractError("backward: parameter '" + name +
                          "' is disconnected from the tape");
    }
  }
  const std::size_t out = output.id();
  nodes_.at(out).value.require_same(seed, "backward seed");
  backward_done_ = true;

  grads_.assign(nodes_.size(), Grid<T>());
  if (nodes_[out].needs_grad) grads_[out] = seed;

  for (std::size_t i = out + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || grads_[i].empty()) continue;
    Grid<T> g = std::move(grads_[i]);
    n.backward(g, *this);
    // Parameters are leaves without closures, so their slots survive.
  }

  GradientMap<T> result;
  for (const auto& [name, id] : params_) {
    if (grads_[id].empty()) {
      result.emplace(name, Grid<T>(nodes_[id].value.shape()));
    } else {
      result.emplace(name, std::move(grads_[id]));
    }
  }
  return result;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace moco

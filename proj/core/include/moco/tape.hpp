#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moco/grid.hpp"

namespace moco {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Grid<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Parameter name -> gradient of the same shape as the parameter.
template <typename T>
using GradientMap = std::map<std::string, Grid<T>>;

/// Records primitive applications in topological order. Each node keeps its
/// forward value; nodes that depend on a parameter also keep a backward
/// closure which reads saved values back through the tape.
///
/// A tape built with record_gradients = false still evaluates every op but
/// never stores closures (used for the momentum branch and evaluation).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Grid<T>& grad_out, Tape& tape)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var<T> constant(Grid<T> value);

  /// Registers a trainable leaf. Registering the same name twice returns the
  /// existing node so a parameter used in several places accumulates one
  /// gradient.
  Var<T> parameter(const std::string& name, const Grid<T>& value);

  /// Used by primitives. `backward` is dropped when no input needs a gradient
  /// or the tape is not recording.
  Var<T> push(const char* op, Grid<T> value, std::vector<std::size_t> inputs,
              BackwardFn backward);

  const Grid<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const char* op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_.at(id).inputs;
  }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool has_parameter(const std::string& name) const {
    return params_.count(name) != 0;
  }
  const std::map<std::string, std::size_t>& parameters() const {
    return params_;
  }

  /// Adds `grad` into the gradient slot of node `id` (no-op for nodes that do
  /// not need gradients).
  void accumulate(std::size_t id, const Grid<T>& grad);
  void accumulate(std::size_t id, Grid<T>&& grad);

  /// Mutable gradient slot, zero-initialised on first access.
  Grid<T>& grad_slot(std::size_t id);

  /// Runs the chain rule from `output` seeded with `seed`. Returns gradients
  /// for every registered parameter (zero grids for parameters the output
  /// does not depend on). Throws ContractError if any name in `requested` was
  /// never registered on this tape.
  GradientMap<T> backward(Var<T> output, const Grid<T>& seed,
                          const std::vector<std::string>& requested = {});

 private:
  struct Node {
    const char* op = "";
    Grid<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool recording_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;  // stable references across push
  std::vector<Grid<T>> grads_;
  std::map<std::string, std::size_t> params_;
};

/// Free-function form of Tape::backward.
template <typename T>
GradientMap<T> reverse_accumulate(Tape<T>& tape, Var<T> output,
                                  const Grid<T>& seed,
                                  const std::vector<std::string>& requested = {}) {
  return tape.backward(output, seed, requested);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace moco

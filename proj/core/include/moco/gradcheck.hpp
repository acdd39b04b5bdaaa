#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moco/tape.hpp"

namespace moco {

/// Builds a scalar (shape {1}) from the given input Vars on `tape`.
using ScalarFn =
    std::function<Var<double>(Tape<double>& tape, std::span<const Var<double>> inputs)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `fn` at `point` against central
/// differences. The per-coordinate error is
///   |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Throws NumericalError naming the coordinate if a perturbed evaluation is
/// not finite.
GradCheckResult finite_difference_check(const ScalarFn& fn,
                                        const std::vector<Grid<double>>& point,
                                        double eps = 1e-5);

}  // namespace moco

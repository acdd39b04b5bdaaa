#include "moco/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moco {
namespace {

std::string input_name(std::size_t i) { return "input" + std::to_string(i); }

double evaluate(const ScalarFn& fn, const std::vector<Grid<double>>& point) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  vars.reserve(point.size());
  for (const auto& g : point) vars.push_back(tape.constant(g));
  return fn(tape, vars).value().item();
}

}  // namespace

GradCheckResult finite_difference_check(const ScalarFn& fn,
                                        const std::vector<Grid<double>>& point,
                                        double eps) {
  if (!(eps > 0)) throw ContractError("finite_difference_check: eps must be > 0");

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (std::size_t i = 0; i < point.size(); ++i) {
    vars.push_back(tape.parameter(input_name(i), point[i]));
  }
  Var<double> out = fn(tape, vars);
  if (out.value().size() != 1) {
    throw ShapeError("finite_difference_check: function is not scalar-valued");
  }
  GradientMap<double> grads = tape.backward(out, Grid<double>::scalar(1.0));

  GradCheckResult result;
  std::vector<Grid<double>> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Grid<double>& analytic = grads.at(input_name(i));
    for (std::size_t j = 0; j < point[i].size(); ++j) {
      const double x0 = point[i][j];
      const auto probe_at = [&](double x) {
        probe[i][j] = x;
        double f = std::numeric_limits<double>::quiet_NaN();
        try {
          f = evaluate(fn, probe);
        } catch (const NumericalError&) {
        }
        if (!std::isfinite(f)) {
          throw NumericalError("finite_difference_check: non-finite output at input " +
                               std::to_string(i) + " index " + std::to_string(j));
        }
        return f;
      };
      const double fp = probe_at(x0 + eps);
      const double fm = probe_at(x0 - eps);
      probe[i][j] = x0;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic[j];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_rel_error || (i == 0 && j == 0)) {
        result = {err, i, j, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace moco

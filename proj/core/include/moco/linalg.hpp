#pragma once

#include <vector>

#include "moco/grid.hpp"

// Small dense linear algebra on 64-bit grids (oracle and diagnostics path).
namespace moco::linalg {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Grid<double> vectors;        // [n,n], column k pairs with values[k]
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Only the upper
/// triangle is trusted; the caller checks symmetry. Throws NumericalError if
/// the off-diagonal mass does not vanish within `max_sweeps`.
SymmetricEigen jacobi_eigen(const Grid<double>& a, double tol = 1e-14,
                            int max_sweeps = 64);

Grid<double> matmul(const Grid<double>& a, const Grid<double>& b);
Grid<double> transpose(const Grid<double>& a);

/// max |a_ij - a_ji|
double asymmetry(const Grid<double>& a);

/// (1/m) (X - mu 1^T)(X - mu 1^T)^T for X [d,m].
Grid<double> row_covariance(const Grid<double>& x);

}  // namespace moco::linalg

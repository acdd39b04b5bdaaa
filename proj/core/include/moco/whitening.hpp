#pragma once

#include <cstddef>
#include <vector>

#include "moco/mode.hpp"
#include "moco/tape.hpp"

namespace moco {

struct BatchStats {
  Grid<double> mu;          // [d]
  Grid<double> sigma_diag;  // [d], population variance
  double eps = 1e-5;
};

/// Per-row standardisation of X [d,m]: (x - mu) / sqrt(max(var, eps)).
/// Rows with variance below eps (constant rows) map to zeros.
Grid<double> batch_standardize(const Grid<double>& x, double eps = 1e-5,
                               BatchStats* stats = nullptr);

struct ZcaResult {
  Grid<double> output;     // W (X - mu 1^T), [d,m]
  Grid<double> whitening;  // W = D Lambda^{-1/2} D^T, [d,d]
  Grid<double> mean;       // mu, [d]
};

/// Exact ZCA whitening through a symmetric eigendecomposition of
/// Sigma = (1/m) Xc Xc^T + eps I.
ZcaResult zca_exact(const Grid<double>& x, double eps = 1e-5);

/// Iterative-normalisation state of one whitening layer.
template <typename T>
struct WhiteningState {
  int iterations = 5;
  T eps = T(1e-5);
  T momentum = T(0.1);  // fraction moved toward the batch value
  Grid<T> running_mu;   // [d]
  Grid<T> running_W;    // [d,d]

  static WhiteningState with_dim(std::size_t d) {
    WhiteningState s;
    s.running_mu = Grid<T>(Shape{d});
    s.running_W = Grid<T>::identity(d);
    return s;
  }
};

/// Newton-Schulz ZCA on X [d,m]:
///   Sigma_N = Sigma / tr(Sigma), P_0 = I,
///   P_{k+1} = (3 P_k - P_k^3 Sigma_N) / 2,  W = P_T / sqrt(tr(Sigma)).
/// Train mode differentiates through every step and moves the running
/// statistics; eval mode applies running_W (X - running_mu).
template <typename T>
Var<T> zca_newton(Var<T> x, WhiteningState<T>& state, Mode mode);

/// Non-differentiable convenience form.
template <typename T>
Grid<T> zca_newton(const Grid<T>& x, WhiteningState<T>& state, Mode mode);

/// Whitens a feature map [B,C,H,W] over its B*H*W samples (d = C).
template <typename T>
Var<T> whitening_layer_apply(WhiteningState<T>& state, Var<T> fm, Mode mode);

/// ||P_k^2 Sigma_N - I||_F for k = 0..iterations, with Sigma_N = sigma/tr(sigma).
std::vector<double> newton_residuals(const Grid<double>& sigma, int iterations);

}  // namespace moco

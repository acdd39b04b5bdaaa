#include "moco/whitening.hpp"

#include <cmath>
#include <string>

#include "moco/linalg.hpp"
#include "moco/ops.hpp"

namespace moco {

Grid<double> batch_standardize(const Grid<double>& x, double eps, BatchStats* stats) {
  if (x.rank() != 2) throw ShapeError("batch_standardize: expected [d,m], got " + to_string(x.shape()));
  const std::size_t d = x.dim(0), m = x.dim(1);
  if (m < 2) throw NumericalError("batch_standardize: degenerate batch (m < 2)");
  Grid<double> out(x.shape());
  Grid<double> mu(Shape{d}), var(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = x.data() + i * m;
    double acc = 0;
    for (std::size_t j = 0; j < m; ++j) acc += row[j];
    mu[i] = acc / static_cast<double>(m);
    double vacc = 0;
    for (std::size_t j = 0; j < m; ++j) vacc += (row[j] - mu[i]) * (row[j] - mu[i]);
    var[i] = vacc / static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(std::max(var[i], eps));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = (row[j] - mu[i]) * inv;
  }
  if (stats) *stats = BatchStats{std::move(mu), std::move(var), eps};
  return out;
}

ZcaResult zca_exact(const Grid<double>& x, double eps) {
  if (x.rank() != 2) throw ShapeError("zca_exact: expected [d,m], got " + to_string(x.shape()));
  const std::size_t d = x.dim(0), m = x.dim(1);
  if (m < 2) throw NumericalError("zca_exact: degenerate batch (m < 2)");
  Grid<double> sigma = linalg::row_covariance(x);
  for (std::size_t i = 0; i < d; ++i) sigma.at(i, i) += eps;

  linalg::SymmetricEigen eig;
  try {
    eig = linalg::jacobi_eigen(sigma);
  } catch (const NumericalError& e) {
    double tr = 0;
    for (std::size_t i = 0; i < d; ++i) tr += sigma.at(i, i);
    throw NumericalError(std::string(e.what()) + "; condition estimate <= " +
                         std::to_string(tr / eps));
  }
  if (!(eig.values.back() > 0)) {
    throw NumericalError("zca_exact: covariance is not positive definite (min eigenvalue " +
                         std::to_string(eig.values.back()) + ")");
  }
  Grid<double> w(Shape{d, d});
  for (std::size_t k = 0; k < d; ++k) {
    const double s = 1.0 / std::sqrt(eig.values[k]);
    for (std::size_t i = 0; i < d; ++i) {
      const double vik = eig.vectors.at(i, k) * s;
      for (std::size_t j = 0; j < d; ++j) w.at(i, j) += vik * eig.vectors.at(j, k);
    }
  }
  // Exact symmetry.
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) w.at(i, j) = w.at(j, i) = 0.5 * (w.at(i, j) + w.at(j, i));

  Grid<double> mu(Shape{d});
  Grid<double> xc(x.shape());
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < m; ++j) acc += x[i * m + j];
    mu[i] = acc / static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) xc[i * m + j] = x[i * m + j] - mu[i];
  }
  return ZcaResult{linalg::matmul(w, xc), std::move(w), std::move(mu)};
}

template <typename T>
Var<T> zca_newton(Var<T> x, WhiteningState<T>& state, Mode mode) {
  using namespace ops;
  if (x.shape().size() != 2) {
    throw ShapeError("zca_newton: expected [d,m], got " + to_string(x.shape()));
  }
  const std::size_t d = x.shape()[0], m = x.shape()[1];
  if (state.iterations < 0) throw ContractError("zca_newton: negative iteration count");
  if (state.running_mu.empty()) {
    state.running_mu = Grid<T>(Shape{d});
    state.running_W = Grid<T>::identity(d);
  }
  if (state.running_mu.shape() != Shape{d} || state.running_W.shape() != Shape{d, d}) {
    throw ShapeError("zca_newton: running state sized for " +
                     to_string(state.running_mu.shape()) + " features, input has " +
                     std::to_string(d));
  }
  Tape<T>& tape = *x.tape();

  if (mode == Mode::kEval) {
    Var<T> xc = sub_row_broadcast(x, tape.constant(state.running_mu));
    return matmul(tape.constant(state.running_W), xc);
  }

  if (m < 2) throw NumericalError("zca_newton: degenerate batch (m < 2)");
  Var<T> mu = row_mean(x);
  Var<T> xc = sub_row_broadcast(x, mu);
  Grid<T> ridge(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) ridge[i * d + i] = state.eps;
  Var<T> sigma = add(scale(matmul(xc, xc, false, true), T(1) / static_cast<T>(m)),
                     tape.constant(std::move(ridge)));
  Var<T> tr = trace(sigma);
  if (!(tr.value()[0] > T(0))) {
    throw NumericalError("zca_newton: degenerate covariance (trace <= 0)");
  }
  Var<T> sigma_n = div_scalar(sigma, tr);
  Var<T> p = tape.constant(Grid<T>::identity(d));
  for (int k = 0; k < state.iterations; ++k) {
    try {
      Var<T> p3 = matmul(matmul(p, p), p);
      p = scale(sub(scale(p, T(3)), matmul(p3, sigma_n)), T(0.5));
    } catch (const NumericalError&) {
      throw NumericalError("zca_newton: divergence at iteration " + std::to_string(k + 1));
    }
  }
  Var<T> w = div_scalar(p, ops::sqrt(tr));

  const T mom = state.momentum;
  for (std::size_t i = 0; i < d; ++i) {
    state.running_mu[i] = (T(1) - mom) * state.running_mu[i] + mom * mu.value()[i];
  }
  // Symmetrised so the running matrix stays exactly symmetric.
  const Grid<T>& wv = w.value();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      const T wij = T(0.5) * (wv[i * d + j] + wv[j * d + i]);
      const T r = (T(1) - mom) * state.running_W[i * d + j] + mom * wij;
      state.running_W[i * d + j] = r;
      state.running_W[j * d + i] = r;
    }
  return matmul(w, xc);
}

template <typename T>
Grid<T> zca_newton(const Grid<T>& x, WhiteningState<T>& state, Mode mode) {
  Tape<T> tape(false);
  return zca_newton(tape.constant(x), state, mode).value();
}

template <typename T>
Var<T> whitening_layer_apply(WhiteningState<T>& state, Var<T> fm, Mode mode) {
  if (fm.shape().size() != 4) {
    throw ShapeError("whitening_layer_apply: expected [B,C,H,W], got " + to_string(fm.shape()));
  }
  const std::size_t b = fm.shape()[0], h = fm.shape()[2], w = fm.shape()[3];
  if (mode == Mode::kTrain && b * h * w < 2) {
    throw NumericalError("whitening_layer_apply: degenerate batch (B*H*W < 2)");
  }
  Var<T> rows = ops::channels_to_rows(fm);
  return ops::rows_to_channels(zca_newton(rows, state, mode), b, h, w);
}

std::vector<double> newton_residuals(const Grid<double>& sigma, int iterations) {
  const std::size_t d = sigma.dim(0);
  double tr = 0;
  for (std::size_t i = 0; i < d; ++i) tr += sigma.at(i, i);
  if (!(tr > 0)) throw NumericalError("newton_residuals: trace <= 0");
  Grid<double> sn = sigma;
  sn *= 1.0 / tr;
  Grid<double> p = Grid<double>::identity(d);
  auto residual = [&] {
    Grid<double> r = linalg::matmul(linalg::matmul(p, p), sn);
    double acc = 0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double e = r.at(i, j) - (i == j ? 1.0 : 0.0);
        acc += e * e;
      }
    return std::sqrt(acc);
  };
  std::vector<double> out{residual()};
  for (int k = 0; k < iterations; ++k) {
    Grid<double> p3s = linalg::matmul(linalg::matmul(linalg::matmul(p, p), p), sn);
    for (std::size_t i = 0; i < d * d; ++i) p[i] = 0.5 * (3.0 * p[i] - p3s[i]);
    out.push_back(residual());
  }
  return out;
}

template Var<float> zca_newton(Var<float>, WhiteningState<float>&, Mode);
template Var<double> zca_newton(Var<double>, WhiteningState<double>&, Mode);
template Grid<float> zca_newton(const Grid<float>&, WhiteningState<float>&, Mode);
template Grid<double> zca_newton(const Grid<double>&, WhiteningState<double>&, Mode);
template Var<float> whitening_layer_apply(WhiteningState<float>&, Var<float>, Mode);
template Var<double> whitening_layer_apply(WhiteningState<double>&, Var<double>, Mode);

}  // namespace moco

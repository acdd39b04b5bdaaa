#include "moco/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moco::linalg {

SymmetricEigen jacobi_eigen(const Grid<double>& input, double tol, int max_sweeps) {
  if (input.rank() != 2 || input.dim(0) != input.dim(1)) {
    throw ShapeError("jacobi_eigen: expected a square matrix, got " +
                     to_string(input.shape()));
  }
  const std::size_t n = input.dim(0);
  // Symmetrise from the upper triangle.
  Grid<double> a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) a.at(i, j) = a.at(j, i) = input.at(i, j);
  Grid<double> v = Grid<double>::identity(n);

  double total = 0;
  for (double x : a.values()) total += x * x;

  int sweep = 0;
  double prev_off = total;
  for (; sweep <= max_sweeps; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    if (off <= tol * tol * total || off == 0.0) break;
    // Rounding floor reached: further sweeps only shuffle ulps around.
    if (off >= prev_off && off <= 1e-24 * total) break;
    prev_off = off;
    if (sweep == max_sweeps) {
      throw NumericalError("jacobi_eigen: no convergence after " +
                           std::to_string(max_sweeps) + " sweeps (off-diagonal " +
                           std::to_string(std::sqrt(off)) + ")");
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double app = a.at(p, p), aqq = a.at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        a.at(p, q) = a.at(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a.at(x, x) > a.at(y, y); });
  SymmetricEigen out;
  out.sweeps = sweep;
  out.values.resize(n);
  out.vectors = Grid<double>(Shape{n, n});
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a.at(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors.at(i, k) = v.at(i, order[k]);
  }
  return out;
}

Grid<double> matmul(const Grid<double>& a, const Grid<double>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("linalg::matmul: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Grid<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      if (ail == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += ail * b[l * n + j];
    }
  return c;
}

Grid<double> transpose(const Grid<double>& a) {
  if (a.rank() != 2) throw ShapeError("linalg::transpose: rank " + std::to_string(a.rank()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Grid<double> t(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

double asymmetry(const Grid<double>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError("asymmetry: expected a square matrix, got " + to_string(a.shape()));
  }
  double m = 0;
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(a.at(i, j) - a.at(j, i)));
  return m;
}

Grid<double> row_covariance(const Grid<double>& x) {
  if (x.rank() != 2) throw ShapeError("row_covariance: rank " + std::to_string(x.rank()));
  const std::size_t d = x.dim(0), m = x.dim(1);
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < m; ++j) mu[i] += x[i * m + j];
    mu[i] /= static_cast<double>(m);
  }
  Grid<double> c(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = i; k < d; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < m; ++j) acc += (x[i * m + j] - mu[i]) * (x[k * m + j] - mu[k]);
      c.at(i, k) = c.at(k, i) = acc / static_cast<double>(m);
    }
  return c;
}

}  // namespace moco::linalg

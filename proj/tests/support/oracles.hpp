#pragma once

// Independent reference implementations used as test oracles. Everything here
// is written with plain loops (or Eigen) and shares no code with the library.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "moco/grid.hpp"

namespace moco::oracle {

inline Grid<double> random_grid(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Grid<double> g(std::move(shape));
  for (double& v : g.values()) v = u(rng);
  return g;
}

inline Grid<double> random_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Grid<double> g(std::move(shape));
  for (double& v : g.values()) v = n(rng);
  return g;
}

inline Eigen::MatrixXd to_eigen(const Grid<double>& g) {
  Eigen::MatrixXd m(g.dim(0), g.dim(1));
  for (std::size_t i = 0; i < g.dim(0); ++i)
    for (std::size_t j = 0; j < g.dim(1); ++j) m(i, j) = g.at(i, j);
  return m;
}

inline Grid<double> from_eigen(const Eigen::MatrixXd& m) {
  Grid<double> g(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) g.at(i, j) = m(i, j);
  return g;
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
inline Eigen::MatrixXd random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  // Sign-fix against R's diagonal so the distribution is uniform.
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

/// Spectrum log-uniform in [1, cond] with the extremes pinned.
inline std::vector<double> spectrum_with_condition(std::size_t n, double cond,
                                                   std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, std::log(cond));
  std::vector<double> l(n);
  for (double& v : l) v = std::exp(u(rng));
  l[0] = 1.0;
  if (n > 1) l[1] = cond;
  return l;
}

/// Q diag(lambda) Q^T.
inline Eigen::MatrixXd spd_from_spectrum(const std::vector<double>& lambda,
                                         std::mt19937_64& rng) {
  const std::size_t n = lambda.size();
  Eigen::MatrixXd q = random_orthogonal(n, rng);
  Eigen::VectorXd l(n);
  for (std::size_t i = 0; i < n; ++i) l(i) = lambda[i];
  Eigen::MatrixXd s = q * l.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

/// Data X [d,m] whose population covariance is exactly `sigma`: X = sigma^{1/2} Z
/// with Z centred and exactly whitened (Z Z^T / m = I). Requires m > d.
inline Grid<double> data_with_covariance(const Eigen::MatrixXd& sigma, std::size_t m,
                                         std::mt19937_64& rng) {
  const Eigen::Index d = sigma.rows();
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd z(d, static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = nd(rng);
  z = z.colwise() - z.rowwise().mean();
  Eigen::MatrixXd c = z * z.transpose() / static_cast<double>(m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ce(c);
  Eigen::MatrixXd c_inv_half = ce.eigenvectors() *
                               ce.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                               ce.eigenvectors().transpose();
  z = c_inv_half * z;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> se(sigma);
  Eigen::MatrixXd s_half = se.eigenvectors() * se.eigenvalues().cwiseSqrt().asDiagonal() *
                           se.eigenvectors().transpose();
  Eigen::MatrixXd x = s_half * z;
  // A random offset exercises mean removal.
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (Eigen::Index i = 0; i < d; ++i) x.row(i).array() += u(rng);
  return from_eigen(x);
}

/// Population covariance of the rows of x [d,m].
inline Eigen::MatrixXd row_covariance(const Grid<double>& x) {
  Eigen::MatrixXd m = to_eigen(x);
  Eigen::MatrixXd c = m.colwise() - m.rowwise().mean();
  return c * c.transpose() / static_cast<double>(m.cols());
}

/// Exact ZCA matrix (Sigma + eps I)^{-1/2} via Eigen.
inline Eigen::MatrixXd zca_matrix(const Eigen::MatrixXd& sigma, double eps) {
  Eigen::MatrixXd s = sigma + eps * Eigen::MatrixXd::Identity(sigma.rows(), sigma.cols());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Eigenvalues of a symmetric matrix, descending.
inline std::vector<double> eigenvalues_desc(const Grid<double>& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(c), Eigen::EigenvaluesOnly);
  std::vector<double> v(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

/// Direct nested-loop convolution, x [B,C,H,W], w [O,C,kh,kw].
inline Grid<double> conv2d(const Grid<double>& x, const Grid<double>& w, std::size_t stride,
                           std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Grid<double> y(Shape{B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W))
                  continue;
                acc += x[((b * C + c) * H + yy) * W + xx] * w[((o * C + c) * kh + u) * kw + v];
              }
          y[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
  return y;
}

/// -log(e^{pos/t} / (e^{pos/t} + sum e^{neg/t})), no stabilisation.
inline double info_nce(double pos, const std::vector<double>& negs, double tau,
                       bool include_positive = true) {
  if (negs.empty()) return 0.0;
  double den = include_positive ? std::exp(pos / tau) : 0.0;
  for (double n : negs) den += std::exp(n / tau);
  return -std::log(std::exp(pos / tau) / den);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::max(std::sqrt(aa) * std::sqrt(bb), 1e-12);
}

/// Mean over rows i of info_nce(zq_i.zk_i, {zq_i.queue_j}).
inline double global_loss(const Grid<double>& zq, const Grid<double>& zk,
                          const Grid<double>& queue, std::size_t fill, double tau) {
  const std::size_t B = zq.dim(0), d = zq.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<double> negs;
    for (std::size_t j = 0; j < fill; ++j) negs.push_back(dot(&zq[i * d], &queue[j * d], d));
    total += info_nce(dot(&zq[i * d], &zk[i * d], d), negs, tau);
  }
  return total / static_cast<double>(B);
}

/// Average of fm [B,C,H,W] over rows [r0,r0+ph) x cols [c0,c0+pw) for image b.
inline std::vector<double> pool_patch(const Grid<double>& fm, std::size_t b, std::size_t r0,
                                      std::size_t c0, std::size_t ph, std::size_t pw) {
  const std::size_t C = fm.dim(1), H = fm.dim(2), W = fm.dim(3);
  std::vector<double> v(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = r0; y < r0 + ph; ++y)
      for (std::size_t x = c0; x < c0 + pw; ++x) v[c] += fm[((b * C + c) * H + y) * W + x];
    v[c] /= static_cast<double>(ph * pw);
  }
  return v;
}

/// Local InfoNCE with a rows x cols tiling of patch size ph x pw.
inline double local_loss(const Grid<double>& fq, const Grid<double>& fk, std::size_t rows,
                         std::size_t cols, std::size_t ph, std::size_t pw, double tau) {
  const std::size_t B = fq.dim(0), K = rows * cols;
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::vector<double>> q(K), k(K);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        q[r * cols + c] = pool_patch(fq, b, r * ph, c * pw, ph, pw);
        k[r * cols + c] = pool_patch(fk, b, r * ph, c * pw, ph, pw);
      }
    for (std::size_t i = 0; i < K; ++i) {
      std::vector<double> negs;
      for (std::size_t j = 0; j < K; ++j)
        if (j != i) negs.push_back(cosine(q[i], k[j]));
      total += info_nce(cosine(q[i], k[i]), negs, tau);
    }
  }
  return total / static_cast<double>(B * K);
}

/// Rows of x [n,d] scaled to unit norm.
inline Grid<double> unit_rows(Grid<double> x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = std::sqrt(dot(&x[i * d], &x[i * d], d));
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] /= norm;
  }
  return x;
}

template <typename T>
double pearson(const T* a, const T* b, std::size_t n) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace moco::oracle

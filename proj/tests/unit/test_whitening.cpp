#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moco/gradcheck.hpp"
#include "moco/linalg.hpp"
#include "moco/ops.hpp"
#include "moco/whitening.hpp"
#include "oracles.hpp"

namespace moco {
namespace {

Grid<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Grid<double>(Shape{1, n}, std::move(v));
}

double max_offdiag_identity_gap(const Eigen::MatrixXd& c) {
  return (c - Eigen::MatrixXd::Identity(c.rows(), c.cols())).cwiseAbs().maxCoeff();
}

WhiteningState<double> state_with(int iterations, std::size_t d) {
  WhiteningState<double> s = WhiteningState<double>::with_dim(d);
  s.iterations = iterations;
  return s;
}

// ------------------------------------------------------------ standardize

TEST(BatchStandardize, TwoValueRow) {
  Grid<double> y = batch_standardize(row({1, 3}));
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(BatchStandardize, ConstantRowMapsToZeros) {
  Grid<double> y = batch_standardize(row({5, 5, 5}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchStandardize, IsIdempotent) {
  std::mt19937_64 rng(1);
  Grid<double> once = batch_standardize(oracle::random_grid(Shape{4, 50}, rng));
  EXPECT_LT(max_abs_diff(batch_standardize(once), once), 1e-10);
}

TEST(BatchStandardize, RowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Grid<double> x = oracle::random_grid(Shape{3, 17}, rng, -4, 9);
    BatchStats stats;
    Grid<double> y = batch_standardize(x, 1e-5, &stats);
    Eigen::MatrixXd c = oracle::row_covariance(y);
    Eigen::MatrixXd ym = oracle::to_eigen(y);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(ym.row(i).mean(), 0.0, 1e-10);
      EXPECT_NEAR(c(i, i), 1.0, 1e-6);
      EXPECT_GE(stats.sigma_diag[i], 0.0);
    }
  }
}

TEST(BatchStandardize, SingleSampleIsDegenerate) {
  EXPECT_THROW(batch_standardize(row({1})), NumericalError);
}

// -------------------------------------------------------------------- exact

TEST(ZcaExact, DiagonalCovarianceHandExample) {
  // Zero-mean rows with covariance diag(4, 1).
  Grid<double> x(Shape{2, 4}, std::vector<double>{2, -2, 2, -2, 1, 1, -1, -1});
  const ZcaResult r = zca_exact(x);
  EXPECT_NEAR(r.whitening.at(0, 0), 0.5, 1e-5);
  EXPECT_NEAR(r.whitening.at(1, 1), 1.0, 1e-5);
  EXPECT_NEAR(r.whitening.at(0, 1), 0.0, 1e-12);
  EXPECT_LT(max_offdiag_identity_gap(oracle::row_covariance(r.output)), 1e-5);
}

TEST(ZcaExact, IdentityCovarianceLeavesCentredDataAlone) {
  std::mt19937_64 rng(3);
  Grid<double> x = oracle::data_with_covariance(Eigen::MatrixXd::Identity(3, 3), 40, rng);
  const ZcaResult r = zca_exact(x);
  Eigen::MatrixXd xm = oracle::to_eigen(x);
  Eigen::MatrixXd centred = xm.colwise() - xm.rowwise().mean();
  EXPECT_LT((oracle::to_eigen(r.output) - centred).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(ZcaExact, OneDimensionIsStandardization) {
  std::mt19937_64 rng(4);
  Grid<double> x = oracle::random_grid(Shape{1, 25}, rng);
  EXPECT_LT(max_abs_diff(zca_exact(x, 0.0).output, batch_standardize(x, 0.0)), 1e-12);
}

TEST(ZcaExact, WIsTheSymmetricInverseSquareRoot) {
  std::mt19937_64 rng(5);
  for (std::size_t d : {2u, 5u, 8u}) {
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 50.0, rng), rng);
    Grid<double> x = oracle::data_with_covariance(sigma, 64, rng);
    const double eps = 1e-5;
    const ZcaResult r = zca_exact(x, eps);
    Eigen::MatrixXd w = oracle::to_eigen(r.whitening);
    Eigen::MatrixXd s = oracle::row_covariance(x) + eps * Eigen::MatrixXd::Identity(d, d);
    EXPECT_LT(linalg::asymmetry(r.whitening), 1e-8);
    EXPECT_LT(max_offdiag_identity_gap(w * s * w), 1e-6);
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(w).eigenvalues().minCoeff(), 0.0);
    EXPECT_LT((w - oracle::zca_matrix(oracle::row_covariance(x), eps)).cwiseAbs().maxCoeff(), 1e-8);
    // Output covariance is the identity up to the eps ridge.
    EXPECT_LT(max_offdiag_identity_gap(oracle::row_covariance(r.output) +
                                       eps * w * w),
              1e-6);
  }
}

TEST(ZcaExact, RaisesMinimumEigenvalueToTheMaximum) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(6, 100.0, rng), rng) * 1e-2 * 1.0;
    Grid<double> x = oracle::data_with_covariance(sigma, 80, rng);
    Eigen::VectorXd ev =
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(oracle::row_covariance(zca_exact(x).output))
            .eigenvalues();
    EXPECT_GE(ev.minCoeff(), (1 - 1e-2) * ev.maxCoeff());
  }
}

TEST(ZcaExact, ExactCopyChannelsSatisfyRidgeIdentity) {
  std::mt19937_64 rng(7);
  Grid<double> base = oracle::random_grid(Shape{1, 30}, rng);
  Grid<double> x(Shape{2, 30});
  for (std::size_t j = 0; j < 30; ++j) x[j] = x[30 + j] = base[j];
  const double eps = 1e-5;
  const ZcaResult r = zca_exact(x, eps);
  Eigen::MatrixXd w = oracle::to_eigen(r.whitening);
  Eigen::MatrixXd s = oracle::row_covariance(x) + eps * Eigen::MatrixXd::Identity(2, 2);
  EXPECT_LT(max_offdiag_identity_gap(w * s * w), 1e-6);
}

// ------------------------------------------------------------------- Newton

TEST(ZcaNewton, IdentityCovarianceConvergesToCentring) {
  std::mt19937_64 rng(8);
  Grid<double> x = oracle::data_with_covariance(Eigen::MatrixXd::Identity(2, 2), 32, rng);
  WhiteningState<double> s = state_with(5, 2);
  Grid<double> y = zca_newton(x, s, Mode::kTrain);
  Eigen::MatrixXd xm = oracle::to_eigen(x);
  Eigen::MatrixXd centred = xm.colwise() - xm.rowwise().mean();
  EXPECT_LT((oracle::to_eigen(y) - centred).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(ZcaNewton, ZeroIterationsDividesByRootTrace) {
  std::mt19937_64 rng(9);
  Grid<double> x = oracle::random_grid(Shape{3, 10}, rng);
  WhiteningState<double> s = state_with(0, 3);
  Grid<double> y = zca_newton(x, s, Mode::kTrain);
  Eigen::MatrixXd xm = oracle::to_eigen(x);
  Eigen::MatrixXd centred = xm.colwise() - xm.rowwise().mean();
  const double tr = oracle::row_covariance(x).trace() + 3 * s.eps;
  EXPECT_LT((oracle::to_eigen(y) - centred / std::sqrt(tr)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ZcaNewton, AgreesWithExactWhenTraceNormalisedSpectrumIsNearOne) {
  std::mt19937_64 rng(10);
  for (double cond : {1.2, 1.5, 2.0}) {
    const Eigen::MatrixXd sigma = oracle::spd_from_spectrum({1.0, cond}, rng);
    Grid<double> x = oracle::data_with_covariance(sigma, 64, rng);
    const Grid<double> exact = zca_exact(x).output;
    WhiteningState<double> s5 = state_with(5, 2), s9 = state_with(9, 2);
    EXPECT_LT(max_abs_diff(zca_newton(x, s5, Mode::kTrain), exact), 1e-3) << cond;
    EXPECT_LT(max_abs_diff(zca_newton(x, s9, Mode::kTrain), exact), 1e-5) << cond;
  }
}

// At the fixed point a perturbation along eigenvectors (i, j) of Sigma is
// scaled by (2 - r - sqrt(r)) / 2 per step, r = lambda_j / lambda_i, so the
// iteration only converges to machine precision while every ratio is below
// about 2.56. Spectra with condition number <= 2 stay in that regime.
TEST(ZcaNewton, ConvergesToExactWithEnoughIterations) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + trial % 15;
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 2.0, rng), rng);
    Grid<double> x = oracle::data_with_covariance(sigma, 64, rng);
    WhiteningState<double> s = state_with(20, d);
    Grid<double> y = zca_newton(x, s, Mode::kTrain);
    EXPECT_LT(max_offdiag_identity_gap(oracle::row_covariance(y)), 1e-4) << "d=" << d;
    EXPECT_LT(max_abs_diff(y, zca_exact(x).output), 1e-4) << "d=" << d;
  }
}

TEST(ZcaNewton, ResidualDecreasesMonotonically) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 2 + trial % 15;
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 2.0, rng), rng);
    const std::vector<double> r = newton_residuals(oracle::from_eigen(sigma), 25);
    for (std::size_t k = 1; k < r.size() && r[k - 1] > 1e-12; ++k) EXPECT_LT(r[k], r[k - 1]) << "k=" << k;
    EXPECT_LT(r.back(), 1e-12);
  }
}

// The layer runs T = 5 steps; over those the residual still shrinks for
// condition numbers up to 100 even though the fixed point is unstable there.
TEST(ZcaNewton, DefaultIterationsShrinkResidualOnIllConditionedSpectra) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 2 + trial % 15;
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 100.0, rng), rng);
    const std::vector<double> r = newton_residuals(oracle::from_eigen(sigma), 5);
    for (std::size_t k = 1; k < r.size(); ++k) EXPECT_LT(r[k], r[k - 1]) << "d=" << d << " k=" << k;
  }
}

TEST(ZcaNewton, TrainModeMovesRunningStatistics) {
  std::mt19937_64 rng(13);
  Grid<double> x = oracle::random_grid(Shape{3, 20}, rng, 1, 3);
  WhiteningState<double> s = state_with(5, 3);
  Tape<double> tape(false);
  Var<double> out = zca_newton(tape.constant(x), s, Mode::kTrain);
  (void)out;
  Eigen::MatrixXd xm = oracle::to_eigen(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s.running_mu[i], 0.1 * xm.row(i).mean(), 1e-14);
  // running_W = 0.9 I + 0.1 W_batch, and W_batch is recoverable from one more
  // update with momentum 1.
  WhiteningState<double> full = state_with(5, 3);
  full.momentum = 1.0;
  zca_newton(x, full, Mode::kTrain);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(s.running_W.at(i, j), 0.9 * (i == j) + 0.1 * full.running_W.at(i, j), 1e-14);
  EXPECT_LT(linalg::asymmetry(s.running_W), 1e-15);
}

TEST(ZcaNewton, EvalModeAppliesRunningStateOnly) {
  std::mt19937_64 rng(14);
  Grid<double> x = oracle::random_grid(Shape{2, 6}, rng);
  WhiteningState<double> s = state_with(5, 2);
  s.running_mu = Grid<double>(Shape{2}, std::vector<double>{0.5, -1});
  s.running_W = Grid<double>(Shape{2, 2}, std::vector<double>{2, 1, 1, 3});
  const WhiteningState<double> before = s;
  Grid<double> y = zca_newton(x, s, Mode::kEval);
  for (std::size_t j = 0; j < 6; ++j) {
    const double a = x[j] - 0.5, b = x[6 + j] + 1;
    EXPECT_NEAR(y[j], 2 * a + b, 1e-14);
    EXPECT_NEAR(y[6 + j], a + 3 * b, 1e-14);
  }
  EXPECT_TRUE(s.running_W == before.running_W);
  EXPECT_TRUE(s.running_mu == before.running_mu);
}

TEST(ZcaNewton, DegenerateInputs) {
  WhiteningState<double> s = state_with(5, 2);
  EXPECT_THROW(zca_newton(Grid<double>(Shape{2, 1}, 1.0), s, Mode::kTrain), NumericalError);
  WhiteningState<double> z = state_with(5, 2);
  z.eps = 0;
  EXPECT_THROW(zca_newton(Grid<double>(Shape{2, 5}, 1.0), z, Mode::kTrain), NumericalError);
  WhiteningState<double> wrong = state_with(5, 3);
  EXPECT_THROW(zca_newton(Grid<double>(Shape{2, 5}, 1.0), wrong, Mode::kTrain), ShapeError);
}

TEST(ZcaNewton, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (std::size_t d : {2u, 4u, 8u}) {
    const Eigen::MatrixXd sigma =
        oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 10.0, rng), rng);
    Grid<double> x = oracle::data_with_covariance(sigma, 24, rng);
    Grid<double> w = oracle::random_grid(Shape{d, 24}, rng);
    const ScalarFn fn = [w, d](Tape<double>& t, std::span<const Var<double>> in) {
      WhiteningState<double> s = state_with(5, d);
      return ops::sum(ops::mul(zca_newton(in[0], s, Mode::kTrain), t.constant(w)));
    };
    EXPECT_LT(finite_difference_check(fn, {x}).max_rel_error, 1e-3) << "d=" << d;
  }
}

TEST(ZcaNewton, FloatPathTracksDoublePath) {
  std::mt19937_64 rng(16);
  Grid<double> x = oracle::random_grid(Shape{4, 40}, rng);
  WhiteningState<double> sd = state_with(5, 4);
  WhiteningState<float> sf = WhiteningState<float>::with_dim(4);
  Grid<double> yd = zca_newton(x, sd, Mode::kTrain);
  Grid<double> yf = zca_newton(x.cast<float>(), sf, Mode::kTrain).cast<double>();
  EXPECT_LT(max_abs_diff(yd, yf), 1e-4);
}

// -------------------------------------------------------------------- layer

TEST(WhiteningLayer, DecorrelatesCorrelatedChannels) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n;
  Grid<double> fm(Shape{4, 2, 3, 3});
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t p = 0; p < 9; ++p) {
      const double a = n(rng), e = n(rng);
      fm[(b * 2 + 0) * 9 + p] = a;
      fm[(b * 2 + 1) * 9 + p] = 0.4 * a + 0.9 * e;
    }
  WhiteningState<double> s = state_with(12, 2);
  Tape<double> tape(false);
  Grid<double> y = whitening_layer_apply(s, tape.constant(fm), Mode::kTrain).value();
  ASSERT_EQ(y.shape(), fm.shape());
  Tape<double> t2(false);
  Eigen::MatrixXd c = oracle::row_covariance(ops::channels_to_rows(t2.constant(y)).value());
  EXPECT_LT(std::abs(c(0, 1)), 1e-3);
}

TEST(WhiteningLayer, SingleSampleIsDegenerate) {
  WhiteningState<double> s = state_with(5, 3);
  Tape<double> tape(false);
  EXPECT_THROW(whitening_layer_apply(s, tape.constant(Grid<double>(Shape{1, 3, 1, 1})), Mode::kTrain),
               NumericalError);
}

TEST(WhiteningLayer, IdentityRunningStateIsIdentityInEval) {
  std::mt19937_64 rng(18);
  Grid<double> fm = oracle::random_grid(Shape{2, 3, 2, 2}, rng);
  WhiteningState<double> s = state_with(5, 3);
  Tape<double> tape(false);
  EXPECT_TRUE(bitwise_equal(whitening_layer_apply(s, tape.constant(fm), Mode::kEval).value(), fm));
}

}  // namespace
}  // namespace moco

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moco/losses.hpp"
#include "moco/ops.hpp"
#include "oracles.hpp"

namespace moco {
namespace {

// ------------------------------------------------------------------- cosine

TEST(CosineSimilarity, Examples) {
  const std::vector<double> e1{1, 0}, e2{0, 1}, d{1, 1};
  EXPECT_DOUBLE_EQ(cosine_similarity(e1, e1), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(e1, e2), 0.0);
  EXPECT_NEAR(cosine_similarity(d, e1), 0.70710678, 1e-8);
}

TEST(CosineSimilarity, ZeroVectorIsGuarded) {
  const std::vector<double> z{0, 0}, a{1, 2};
  EXPECT_EQ(cosine_similarity(z, a), 0.0);
}

// ----------------------------------------------------------------- info_nce

TEST(InfoNce, PositiveOneAgainstTwoZeros) {
  EXPECT_NEAR(info_nce({1.0, {0, 0}, 1.0}), std::log(1 + 2 * std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(info_nce({1.0, {0, 0}, 1.0}), 0.551444, 1e-6);
}

TEST(InfoNce, EmptyNegativesGiveExactlyZero) {
  EXPECT_EQ(info_nce({0.37, {}, 0.2}), 0.0);
  EXPECT_EQ(info_nce({-5.0, {}, 0.2}, false), 0.0);
}

TEST(InfoNce, UniformLogitsGiveLogOfCount) {
  for (std::size_t n : {1u, 4u, 31u})
    for (double tau : {0.07, 0.2, 1.0}) {
      EXPECT_NEAR(info_nce({0.3, std::vector<double>(n, 0.3), tau}), std::log(n + 1.0), 1e-12);
    }
}

TEST(InfoNce, RejectsNonPositiveTemperature) {
  EXPECT_THROW(info_nce({1.0, {0}, 0.0}), ContractError);
}

TEST(InfoNce, ShiftInvariance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    SimilarityScores s{u(rng), {u(rng), u(rng), u(rng)}, 0.2 + 0.5 * (u(rng) + 1)};
    SimilarityScores shifted = s;
    const double c = 3 * u(rng);
    shifted.pos += c;
    for (double& n : shifted.negs) n += c;
    EXPECT_NEAR(info_nce(s), info_nce(shifted), 1e-10);
  }
}

TEST(InfoNce, MonotoneInPositiveAndNegatives) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    SimilarityScores s{u(rng), {u(rng), u(rng), u(rng), u(rng)}, 0.5};
    const double base = info_nce(s);
    EXPECT_GE(base, 0.0);
    SimilarityScores p = s;
    p.pos += 1e-3;
    EXPECT_LT(info_nce(p), base);
    for (std::size_t j = 0; j < s.negs.size(); ++j) {
      SimilarityScores n = s;
      n.negs[j] += 1e-3;
      EXPECT_GT(info_nce(n), base);
    }
  }
}

TEST(InfoNce, MatchesUnstabilisedOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    SimilarityScores s{u(rng), {}, 0.2};
    for (int j = 0; j < 1 + trial % 9; ++j) s.negs.push_back(u(rng));
    for (bool incl : {true, false}) {
      EXPECT_NEAR(info_nce(s, incl), oracle::info_nce(s.pos, s.negs, s.tau, incl), 1e-10);
    }
  }
}

TEST(InfoNce, NegativesOnlyFormIsUnboundedBelow) {
  EXPECT_LT(info_nce({1.0, {-1.0}, 0.2}, false), 0.0);
}

// -------------------------------------------------------------------- global

Grid<double> eval_global(const Grid<double>& zq, const Grid<double>& zk, const Grid<double>& queue,
                         std::size_t fill, double tau) {
  Tape<double> tape(false);
  return global_loss(tape.constant(zq), zk, queue, fill, tau).value();
}

TEST(GlobalLoss, EmptyQueueGivesZero) {
  std::mt19937_64 rng(4);
  Grid<double> zq = oracle::unit_rows(oracle::random_grid(Shape{3, 4}, rng));
  Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{3, 4}, rng));
  EXPECT_EQ(eval_global(zq, zk, Grid<double>(Shape{8, 4}), 0, 0.2).item(), 0.0);
}

TEST(GlobalLoss, SingleNegativeScalarExample) {
  Grid<double> e1(Shape{1, 2}, std::vector<double>{1, 0});
  Grid<double> e2(Shape{1, 2}, std::vector<double>{0, 1});
  EXPECT_NEAR(eval_global(e1, e1, e2, 1, 0.2).item(), std::log(1 + std::exp(-5.0)), 1e-15);
  EXPECT_NEAR(eval_global(e1, e1, e2, 1, 0.2).item(), 0.006715, 1e-6);
}

TEST(GlobalLoss, DuplicatedQueueDoublesNegativeWeight) {
  std::mt19937_64 rng(5);
  Grid<double> zq = oracle::unit_rows(oracle::random_grid(Shape{2, 5}, rng));
  Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{2, 5}, rng));
  Grid<double> q = oracle::unit_rows(oracle::random_grid(Shape{3, 5}, rng));
  Grid<double> qq(Shape{6, 5});
  for (std::size_t i = 0; i < 15; ++i) qq[i] = qq[15 + i] = q[i];
  double ref = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double pos = oracle::dot(&zq[i * 5], &zk[i * 5], 5) / 0.2;
    double den = std::exp(pos);
    for (std::size_t j = 0; j < 3; ++j) den += 2 * std::exp(oracle::dot(&zq[i * 5], &q[j * 5], 5) / 0.2);
    ref += std::log(den) - pos;
  }
  EXPECT_NEAR(eval_global(zq, zk, qq, 6, 0.2).item(), ref / 2, 1e-12);
}

TEST(GlobalLoss, OnlyFilledRowsAreNegatives) {
  std::mt19937_64 rng(6);
  Grid<double> zq = oracle::unit_rows(oracle::random_grid(Shape{2, 4}, rng));
  Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{2, 4}, rng));
  Grid<double> q = oracle::unit_rows(oracle::random_grid(Shape{8, 4}, rng));
  EXPECT_NEAR(eval_global(zq, zk, q, 3, 0.2).item(), oracle::global_loss(zq, zk, q, 3, 0.2), 1e-12);
}

TEST(GlobalLoss, MatchesBruteForce) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + trial % 4, Q = 1 + (trial * 7) % 32, d = 3 + trial % 6;
    Grid<double> zq = oracle::unit_rows(oracle::random_grid(Shape{B, d}, rng));
    Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{B, d}, rng));
    Grid<double> q = oracle::unit_rows(oracle::random_grid(Shape{Q, d}, rng));
    EXPECT_NEAR(eval_global(zq, zk, q, Q, 0.2).item(), oracle::global_loss(zq, zk, q, Q, 0.2), 1e-8);
  }
}

TEST(GlobalLoss, RejectsUnnormalisedRows) {
  Grid<double> a(Shape{1, 2}, std::vector<double>{1, 0});
  Grid<double> bad(Shape{1, 2}, std::vector<double>{1.01, 0});
  EXPECT_THROW(eval_global(bad, a, a, 1, 0.2), ContractError);
  EXPECT_THROW(eval_global(a, bad, a, 1, 0.2), ContractError);
  EXPECT_THROW(eval_global(a, a, bad, 1, 0.2), ContractError);
  EXPECT_NO_THROW(eval_global(a, a, bad, 0, 0.2));
}

TEST(GlobalLoss, NoGradientReachesKeysOrQueue) {
  std::mt19937_64 rng(8);
  Tape<double> tape;
  Var<double> zq = tape.parameter("zq", oracle::unit_rows(oracle::random_grid(Shape{2, 4}, rng)));
  Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{2, 4}, rng));
  Grid<double> q = oracle::unit_rows(oracle::random_grid(Shape{4, 4}, rng));
  Var<double> l = global_loss(zq, zk, q, 4, 0.2);
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (tape.value(i) == zk || tape.value(i) == q) EXPECT_FALSE(tape.requires_grad(i));
  }
  EXPECT_GT(tape.backward(l, Grid<double>::scalar(1.0)).at("zq").max_abs(), 0.0);
}

// --------------------------------------------------------------------- local

TEST(PatchLayout, SixtyFourSquareWithTwentyPatches) {
  const PatchLayout p = choose_patch_layout(64, 64, 20);
  EXPECT_EQ(p.rows, 4u);
  EXPECT_EQ(p.cols, 5u);
  EXPECT_EQ(p.patch_h, 16u);
  EXPECT_EQ(p.patch_w, 12u);
  EXPECT_EQ(p.cols * p.patch_w, 60u);
}

TEST(PatchLayout, ExactFitGivesUnitPatches) {
  const PatchLayout p = choose_patch_layout(4, 5, 20);
  EXPECT_EQ(p.rows, 4u);
  EXPECT_EQ(p.cols, 5u);
  EXPECT_EQ(p.patch_h, 1u);
  EXPECT_EQ(p.patch_w, 1u);
}

TEST(PatchLayout, FollowsAspectRatio) {
  const PatchLayout p = choose_patch_layout(8, 32, 4);
  EXPECT_EQ(p.rows, 1u);
  EXPECT_EQ(p.cols, 4u);
  const PatchLayout q = choose_patch_layout(32, 8, 4);
  EXPECT_EQ(q.rows, 4u);
  EXPECT_EQ(q.cols, 1u);
}

TEST(PatchLayout, RejectsImpossibleGrids) {
  EXPECT_THROW(choose_patch_layout(4, 4, 20), ContractError);
  EXPECT_THROW(choose_patch_layout(2, 6, 7), ContractError);
}

TEST(SamplePatchGrid, ConstantMapGivesEqualVectors) {
  Tape<double> tape(false);
  Grid<double> fm(Shape{1, 3, 16, 16}, 0.25);
  PatchGrid<double> pg = sample_patch_grid(tape.constant(fm), fm, 20);
  for (double v : pg.pooled_q.value().values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(SamplePatchGrid, UnitPatchesAreRawColumns) {
  std::mt19937_64 rng(9);
  Grid<double> fm = oracle::random_grid(Shape{2, 3, 4, 5}, rng);
  Tape<double> tape(false);
  PatchGrid<double> pg = sample_patch_grid(tape.constant(fm), fm, 20);
  const Grid<double>& p = pg.pooled_q.value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 20; ++k)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p[(b * 20 + k) * 3 + c], fm[(b * 3 + c) * 20 + k]);
}

TEST(SamplePatchGrid, KeyViewIsDetached) {
  std::mt19937_64 rng(10);
  Grid<double> fm = oracle::random_grid(Shape{1, 2, 8, 8}, rng);
  Tape<double> tape;
  Var<double> q = tape.parameter("q", fm);
  PatchGrid<double> pg = sample_patch_grid(q, fm, 4);
  EXPECT_TRUE(pg.pooled_q.requires_grad());
  EXPECT_FALSE(pg.pooled_k.requires_grad());
  EXPECT_THROW(sample_patch_grid(q, Grid<double>(Shape{1, 2, 8, 4}), 4), ShapeError);
}

Grid<double> orthonormal_patches(std::size_t B, std::size_t K) {
  Grid<double> p(Shape{B, K, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) p[(b * K + k) * K + k] = 1.0;
  return p;
}

double eval_local(const Grid<double>& pq, const Grid<double>& pk, double tau) {
  Tape<double> tape(false);
  PatchGrid<double> pg{PatchLayout{}, tape.constant(pq), tape.constant(pk)};
  return local_loss(pg, tau).value().item();
}

TEST(LocalLoss, OrthonormalPatchesScalarExample) {
  const Grid<double> p = orthonormal_patches(2, 20);
  EXPECT_NEAR(eval_local(p, p, 1.0), std::log(1 + 19 * std::exp(-1.0)), 1e-10);
  EXPECT_NEAR(eval_local(p, p, 1.0), 2.078154, 1e-6);
}

TEST(LocalLoss, IdenticalVectorsGiveLogTwo) {
  Grid<double> p(Shape{3, 2, 4}, 0.5);
  EXPECT_NEAR(eval_local(p, p, 0.2), std::log(2.0), 1e-12);
}

TEST(LocalLoss, RejectsSinglePatch) {
  Grid<double> p(Shape{1, 1, 4}, 0.5);
  EXPECT_THROW(eval_local(p, p, 0.2), ContractError);
}

TEST(LocalLoss, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + trial % 4, K = trial % 2 ? 4 : 20, C = 2 + trial % 5;
    const std::size_t H = K == 4 ? 6 + trial % 5 : 9 + trial % 4, W = K == 4 ? 7 : 11;
    Grid<double> fq = oracle::random_grid(Shape{B, C, H, W}, rng);
    Grid<double> fk = oracle::random_grid(Shape{B, C, H, W}, rng);
    Tape<double> tape(false);
    PatchGrid<double> pg = sample_patch_grid(tape.constant(fq), fk, K);
    const PatchLayout& l = pg.layout;
    ASSERT_EQ(l.count(), K);
    const double got = local_loss(pg, 0.2).value().item();
    EXPECT_GE(got, 0.0);
    EXPECT_NEAR(got, oracle::local_loss(fq, fk, l.rows, l.cols, l.patch_h, l.patch_w, 0.2), 1e-8)
        << "trial " << trial;
  }
}

// --------------------------------------------------------------------- total

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss(0.5, 2.0, 0.0), 0.5);
  EXPECT_EQ(total_loss(0.5, 2.0, 1.0), 2.5);
  EXPECT_THROW(total_loss(0.5, 2.0, -1.0), ContractError);
}

TEST(TotalLoss, SlopeInLocalTermIsLambda) {
  for (double lambda : {0.0, 0.3, 1.0, 4.0}) {
    const double a = total_loss(0.7, 1.0, lambda), b = total_loss(0.7, 3.5, lambda);
    EXPECT_NEAR((b - a) / 2.5, lambda, 1e-15);
  }
}

TEST(TotalLoss, GradientIsLinearCombination) {
  std::mt19937_64 rng(12);
  const Grid<double> fm0 = oracle::random_grid(Shape{2, 3, 8, 8}, rng);
  const Grid<double> fk = oracle::random_grid(Shape{2, 3, 8, 8}, rng);
  const Grid<double> proj = oracle::random_grid(Shape{3, 4}, rng);
  const Grid<double> zk = oracle::unit_rows(oracle::random_grid(Shape{2, 4}, rng));
  const Grid<double> q = oracle::unit_rows(oracle::random_grid(Shape{6, 4}, rng));
  const double lambda = 0.7;
  enum Which { kGlobal, kLocal, kTotal };
  auto grad = [&](Which w) {
    Tape<double> t;
    Var<double> fm = t.parameter("fm", fm0);
    Var<double> z = ops::l2_normalize(ops::matmul(ops::global_avg_pool(fm), t.constant(proj)));
    Var<double> lg = global_loss(z, zk, q, 6, 0.2);
    Var<double> ll = local_loss(sample_patch_grid(fm, fk, 4), 0.2);
    Var<double> out = w == kGlobal ? lg : w == kLocal ? ll : total_loss(lg, ll, lambda);
    return t.backward(out, Grid<double>::scalar(1.0)).at("fm");
  };
  const Grid<double> g = grad(kGlobal), l = grad(kLocal), tot = grad(kTotal);
  for (std::size_t i = 0; i < tot.size(); ++i) EXPECT_NEAR(tot[i], g[i] + lambda * l[i], 1e-10);
}

}  // namespace
}  // namespace moco

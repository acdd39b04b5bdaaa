#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "moco/diagnostics.hpp"
#include "moco/whitening.hpp"
#include "oracles.hpp"

namespace moco {
namespace {

namespace fs = std::filesystem;

Grid<double> diag(std::vector<double> d) {
  Grid<double> g(Shape{d.size(), d.size()});
  for (std::size_t i = 0; i < d.size(); ++i) g.at(i, i) = d[i];
  return g;
}

TEST(Covariance, TwoOppositeSamples) {
  const Grid<double> c =
      representation_covariance(Grid<double>(Shape{2, 2}, std::vector<double>{1, 0, -1, 0}));
  EXPECT_EQ(c.storage(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Covariance, IdenticalSamplesGiveZero) {
  const Grid<double> c = representation_covariance(Grid<double>(Shape{5, 3}, 0.7));
  EXPECT_EQ(c.max_abs(), 0.0);
  EXPECT_THROW(representation_covariance(Grid<double>(Shape{1, 3})), ContractError);
}

TEST(Covariance, MatchesEigenOracle) {
  std::mt19937_64 rng(1);
  const Grid<double> f = oracle::random_grid(Shape{40, 6}, rng);
  const Grid<double> c = representation_covariance(f);
  // oracle::row_covariance works on [d, m]; transpose the sample matrix.
  Grid<double> ft(Shape{6, 40});
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = 0; j < 6; ++j) ft.at(j, i) = f.at(i, j);
  EXPECT_LT((oracle::to_eigen(c) - oracle::row_covariance(ft)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Spectrum, Examples) {
  EXPECT_EQ(singular_spectrum(diag({1, 3})), (std::vector<double>{3, 1}));
  Grid<double> r1(Shape{2, 2}, 1.0);  // v = (1,1), |v|^2 = 2
  const auto s = singular_spectrum(r1);
  EXPECT_NEAR(s[0], 2.0, 1e-12);
  EXPECT_EQ(s[1], 0.0);
}

TEST(Spectrum, RandomPsdMatchesEigen) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Grid<double> a = oracle::random_grid(Shape{6, 6}, rng);
    Grid<double> c(Shape{6, 6});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t k = 0; k < 6; ++k) c.at(i, j) += a.at(i, k) * a.at(j, k);
    const auto got = singular_spectrum(c);
    const auto want = oracle::eigenvalues_desc(c);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(got[i], std::max(want[i], 0.0), 1e-8);
  }
}

TEST(Spectrum, RejectsAsymmetricOrNonSquare) {
  Grid<double> c = diag({1, 1});
  c.at(0, 1) = 1e-3;
  EXPECT_THROW(singular_spectrum(c), ContractError);
  EXPECT_THROW(singular_spectrum(Grid<double>(Shape{2, 3})), ContractError);
}

TEST(EffectiveRank, Examples) {
  EXPECT_NEAR(effective_rank({2, 2, 2, 2, 2}), 5.0, 1e-12);
  EXPECT_NEAR(effective_rank({3, 0, 0}), 1.0, 1e-15);
  EXPECT_NEAR(effective_rank({0.5, 0.5, 0, 0}), 2.0, 1e-12);
  EXPECT_THROW(effective_rank({}), ContractError);
  EXPECT_THROW(effective_rank({0, 0}), ContractError);
}

TEST(EffectiveRank, LiesBetweenOneAndDimension) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + trial % 12);
    for (double& v : s) v = u(rng) * u(rng);
    const double e = effective_rank(s);
    EXPECT_GE(e, 1.0 - 1e-12);
    EXPECT_LE(e, static_cast<double>(s.size()) + 1e-12);
  }
}

TEST(CollapseIndex, Examples) {
  EXPECT_EQ(collapse_index({1, 1, 1}), 0u);
  EXPECT_EQ(collapse_index({1, 1e-9, 1e-9}, 1e-4), 2u);
  EXPECT_EQ(collapse_index({1, 1e-4}, 1e-4), 0u);
  EXPECT_THROW(collapse_index({}), ContractError);
  EXPECT_THROW(collapse_index({1}, 1.0), ContractError);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

TEST(SpectrumCsv, DiagonalReportRows) {
  SpectrumReport r;
  r.singular_values = {10, 1};
  r.log10_values = {1, 0};
  const fs::path p = fs::temp_directory_path() / "moco_spectrum_a.csv";
  export_spectrum_csv(r, p);
  const auto rows = read_csv(p);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"index", "singular_value", "log10_singular_value"}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"0", "10", "1"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"1", "1", "0"}));
  fs::remove(p);
}

TEST(SpectrumCsv, ZeroValueUsesSentinelAndParsesBack) {
  std::mt19937_64 rng(4);
  const Grid<double> f = oracle::random_grid(Shape{5, 8}, rng);  // rank <= 4
  const SpectrumReport r = spectrum_report(f, FeatureSource::kPooledBackbone);
  EXPECT_EQ(r.feature_dim, 8u);
  EXPECT_EQ(r.num_samples, 5u);
  EXPECT_GE(r.collapse_index, 4u);
  const fs::path p = fs::temp_directory_path() / "moco_spectrum_b.csv";
  export_spectrum_csv(r, p);
  const auto rows = read_csv(p);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(std::stod(rows[i + 1][1]), r.singular_values[i]);
    if (r.singular_values[i] == 0.0) EXPECT_EQ(rows[i + 1][2], "-16");
    else EXPECT_EQ(std::stod(rows[i + 1][2]), std::log10(r.singular_values[i]));
  }
  fs::remove(p);
}

TEST(SpectrumProperties, RotationInvariance) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Grid<double> f = oracle::random_grid(Shape{30, 6}, rng);
    const Eigen::MatrixXd rot = oracle::random_orthogonal(6, rng);
    const Grid<double> fr = oracle::from_eigen(oracle::to_eigen(f) * rot);
    const auto a = singular_spectrum(representation_covariance(f));
    const auto b = singular_spectrum(representation_covariance(fr));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a[i], b[i], 1e-8);
  }
}

TEST(SpectrumProperties, ScaleCovariance) {
  std::mt19937_64 rng(6);
  const Grid<double> f = oracle::random_grid(Shape{30, 5}, rng);
  for (double s : {0.5, 3.0}) {
    Grid<double> fs = f;
    for (double& v : fs.values()) v *= s;
    const auto a = singular_spectrum(representation_covariance(f));
    const auto b = singular_spectrum(representation_covariance(fs));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(b[i], s * s * a[i], 1e-8);
  }
}

TEST(SpectrumProperties, WhitenedFeaturesHaveFullEffectiveRank) {
  std::mt19937_64 rng(7);
  const std::size_t d = 8;
  const Eigen::MatrixXd sigma = oracle::spd_from_spectrum(oracle::spectrum_with_condition(d, 100, rng), rng);
  const Grid<double> x = oracle::data_with_covariance(sigma, 200, rng);  // [d, m]
  const Grid<double> w = zca_exact(x, 1e-5).output;
  Grid<double> feats(Shape{200, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < 200; ++j) feats.at(j, i) = w.at(i, j);
  EXPECT_GE(effective_rank(singular_spectrum(representation_covariance(feats))), 0.99 * d);
}

TEST(FeatureSource, Parsing) {
  EXPECT_EQ(parse_feature_source("pooled"), FeatureSource::kPooledBackbone);
  EXPECT_EQ(parse_feature_source("projector_embedding"), FeatureSource::kProjectorEmbedding);
  EXPECT_THROW(parse_feature_source("logits"), ConfigError);
}

TEST(ExtractFeatures, ShapesPerSource) {
  EncoderConfig e;
  e.stage_channels = {4, 8};
  e.stage_strides = {1, 2};
  ProjectorConfig p{8, 8, 4};
  NamedGrids<float> params, buffers;
  std::mt19937_64 rng(8);
  Encoder(e).init(params, buffers, rng);
  Projector(p).init(params, rng);
  const Grid<float> imgs = oracle::random_grid(Shape{5, 1, 8, 8}, rng, 0, 1).cast<float>();
  const Grid<double> pooled = extract_features(e, p, params, buffers, imgs, FeatureSource::kPooledBackbone, 2);
  const Grid<double> emb = extract_features(e, p, params, buffers, imgs, FeatureSource::kProjectorEmbedding, 3);
  EXPECT_EQ(pooled.shape(), (Shape{5, 8}));
  EXPECT_EQ(emb.shape(), (Shape{5, 4}));
  // batching does not change eval-mode features
  const Grid<double> whole = extract_features(e, p, params, buffers, imgs, FeatureSource::kPooledBackbone, 5);
  EXPECT_LT(max_abs_diff(pooled, whole), 1e-6);
}

}  // namespace
}  // namespace moco

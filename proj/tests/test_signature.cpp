#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "subnetscope/error.hpp"
#include "subnetscope/signature.hpp"

using namespace subnetscope;

namespace {

SignatureMatrix from_rows(Matrix rows) {
  SignatureMatrix s;
  s.rows = std::move(rows);
  for (std::size_t i = 0; i < s.rows.size(); ++i) s.classes.push_back(static_cast<int>(i));
  return s;
}

Matrix euclid(const Matrix& pts) { return pairwise_distance(from_rows(pts), Metric::euclidean); }

Matrix random_rows(std::size_t k, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(k, std::vector<double>(d));
  for (auto& r : m)
    for (double& v : r) v = u(rng);
  return m;
}

SubnetworkBundle bundle_with(int cls, std::vector<std::vector<double>> layers) {
  SubnetworkBundle b;
  b.class_id = cls;
  b.gates.layers = std::move(layers);
  return b;
}

}  // namespace

TEST(Signatures, OneRowPerClass) {
  std::vector<SubnetworkBundle> bundles;
  for (int c = 0; c < 3; ++c) bundles.push_back(bundle_with(c, {{1.0 * c, 0.5}, {0.0, 0.0, 2.0}}));
  bundles.push_back(bundle_with(3, {{1.0, 0.5}, {0.0, 0.0, 2.0}}));
  const SignatureMatrix s = build_signatures(bundles, 4);
  ASSERT_EQ(s.rows.size(), 4u);
  EXPECT_EQ(s.rows[2], (std::vector<double>{2.0, 0.5, 0.0, 0.0, 2.0}));
  EXPECT_EQ(s.rows[1], s.rows[3]);
}

TEST(Signatures, ZeroBundleGivesZeroRow) {
  std::vector<SubnetworkBundle> bundles{bundle_with(0, {{0.0, 0.0}}), bundle_with(1, {{1.0, 1.0}})};
  const SignatureMatrix s = build_signatures(bundles, 2);
  EXPECT_EQ(s.rows[0], (std::vector<double>{0.0, 0.0}));
}

TEST(Signatures, Errors) {
  std::vector<SubnetworkBundle> missing{bundle_with(0, {{1.0}}), bundle_with(2, {{1.0}})};
  EXPECT_THROW(build_signatures(missing, 3), DataError);
  std::vector<SubnetworkBundle> ragged{bundle_with(0, {{1.0}}), bundle_with(1, {{1.0, 2.0}})};
  EXPECT_THROW(build_signatures(ragged, 2), ShapeError);
}

TEST(Distance, Examples) {
  const Matrix e = euclid({{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}});
  EXPECT_NEAR(e[0][1], std::sqrt(2.0), 1e-15);
  EXPECT_EQ(e[0][2], 0.0);
  const Matrix c = pairwise_distance(from_rows({{1, 1, 0, 0}, {0, 0, 1, 1}, {2, 2, 0, 0}}), Metric::cosine);
  EXPECT_NEAR(c[0][1], 1.0, 1e-15);
  EXPECT_NEAR(c[0][2], 0.0, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(c[i][i], 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c[i][j], c[j][i]);
  }
}

TEST(Distance, CosineZeroRowNamesClass) {
  SignatureMatrix s = from_rows({{1.0, 0.0}, {0.0, 0.0}});
  s.names = {"triangle", "square"};
  try {
    pairwise_distance(s, Metric::cosine);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("square"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(pairwise_distance(s, Metric::euclidean));
}

TEST(Cluster, HandWorkedAverageLinkage) {
  const Clustering c = agglomerate(euclid({{0.0}, {1.0}, {5.0}, {6.5}}), 2);
  ASSERT_EQ(c.dendrogram.merges.size(), 3u);
  const auto& m = c.dendrogram.merges;
  EXPECT_EQ(m[0].a, 0u);
  EXPECT_EQ(m[0].b, 1u);
  EXPECT_DOUBLE_EQ(m[0].distance, 1.0);
  EXPECT_EQ(m[1].a, 2u);
  EXPECT_EQ(m[1].b, 3u);
  EXPECT_DOUBLE_EQ(m[1].distance, 1.5);
  EXPECT_EQ(m[2].a, 4u);
  EXPECT_EQ(m[2].b, 5u);
  EXPECT_DOUBLE_EQ(m[2].distance, (5.0 + 6.5 + 4.0 + 5.5) / 4);
  EXPECT_EQ(m[2].size, 4u);
  EXPECT_EQ(c.assignment, (std::vector<int>{0, 0, 1, 1}));
}

TEST(Cluster, TwoBlocksRecovered) {
  // blocks {0,2,5} and {1,3,4}, intra <= 0.1, inter >= 0.9
  const std::vector<int> block{0, 1, 0, 1, 1, 0};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lo(0.01, 0.1), hi(0.9, 1.0);
  Matrix d(6, std::vector<double>(6, 0.0));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) d[i][j] = d[j][i] = block[i] == block[j] ? lo(rng) : hi(rng);
  const Clustering c = agglomerate(d, 2);
  EXPECT_EQ(c.assignment, block);

  // brute force: the block split has the lowest total within-cluster distance
  auto cost = [&](unsigned mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = i + 1; j < 6; ++j)
        if (((mask >> i) & 1u) == ((mask >> j) & 1u)) s += d[i][j];
    return s;
  };
  unsigned best = 0;
  for (unsigned mask = 1; mask < 63; ++mask)
    if (cost(mask) < cost(best) || best == 0) best = mask;
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_EQ(((best >> i) & 1u) == (best & 1u), block[i] == block[0]);
}

TEST(Cluster, ExtremeCuts) {
  const Matrix d = euclid(random_rows(5, 3, 1));
  EXPECT_EQ(agglomerate(d, 5).assignment, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(agglomerate(d, 1).assignment, (std::vector<int>(5, 0)));
  EXPECT_THROW(agglomerate(d, 0), ConfigError);
  EXPECT_THROW(agglomerate(d, 6), ConfigError);
}

TEST(Cluster, LinkageDistancesNondecreasing) {
  const Clustering c = agglomerate(euclid(random_rows(12, 4, 9)), 3);
  for (std::size_t i = 1; i < c.dendrogram.merges.size(); ++i)
    EXPECT_GE(c.dendrogram.merges[i].distance, c.dendrogram.merges[i - 1].distance - 1e-12);
  EXPECT_EQ(c.dendrogram.leaf_order.size(), 12u);
}

TEST(Pca, MatchesDenseEigensolver) {
  const Matrix rows = random_rows(10, 240, 5);
  const Projection p = project_2d(rows);
  Eigen::MatrixXd x(10, 240);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 240; ++j) x(i, j) = rows[i][j];
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centred.transpose() * centred / 9.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const auto ev = es.eigenvalues();
  EXPECT_NEAR(p.variance[0], ev(239), 1e-6);
  EXPECT_NEAR(p.variance[1], ev(238), 1e-6);
  // loadings agree up to sign
  for (int k = 0; k < 2; ++k) {
    double dot = 0.0;
    for (int j = 0; j < 240; ++j) dot += p.components[k][j] * es.eigenvectors()(j, 239 - k);
    EXPECT_NEAR(std::abs(dot), 1.0, 1e-6);
  }
}

TEST(Pca, TwoDimensionalPointsKeepDistances) {
  const Matrix pts{{0.0, 0.0}, {3.0, 1.0}, {-1.0, 2.0}, {2.0, -2.5}, {0.5, 0.7}};
  const Projection p = project_2d(pts);
  const Matrix a = euclid(pts), b = euclid(p.coords);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j) EXPECT_NEAR(a[i][j], b[i][j], 1e-9);
}

TEST(Pca, CollinearSecondVarianceZero) {
  Matrix rows;
  const std::vector<double> dir = random_rows(1, 50, 2)[0];
  for (double t : {-2.0, -0.5, 0.0, 1.0, 3.0}) {
    std::vector<double> r(50);
    for (std::size_t j = 0; j < 50; ++j) r[j] = 1.0 + t * dir[j];
    rows.push_back(r);
  }
  const Projection p = project_2d(rows);
  EXPECT_GT(p.variance[0], 1.0);
  EXPECT_NEAR(p.variance[1], 0.0, 1e-9);
}

TEST(Pca, SignRuleAndRowOrderInvariance) {
  Matrix rows = random_rows(8, 30, 7);
  const Projection p = project_2d(rows);
  for (const auto& comp : p.components) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < comp.size(); ++j)
      if (std::abs(comp[j]) > std::abs(comp[arg])) arg = j;
    EXPECT_GT(comp[arg], 0.0);
  }
  std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  Matrix shuffled;
  for (std::size_t i : perm) shuffled.push_back(rows[i]);
  const Projection q = project_2d(shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(q.coords[i][k], p.coords[perm[i]][k], 1e-7);
}

TEST(Pca, NonConvergenceReported) {
  EXPECT_THROW(project_2d(random_rows(10, 40, 3), 1e-30, 2), NumericError);
  EXPECT_NO_THROW(project_2d(random_rows(10, 40, 3)));
}

TEST(Ari, KnownValues) {
  const std::vector<int> a{0, 0, 0, 1, 1, 1}, relabelled{2, 2, 2, 0, 0, 0};
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, relabelled), 1.0);
  // contingency [[2,0,0],[0,1,1]] gives (1 - 1/3) / (3/2 - 1/3)
  const std::vector<int> x{0, 0, 1, 1}, y{0, 0, 1, 2};
  EXPECT_NEAR(adjusted_rand_index(x, y), 4.0 / 7.0, 1e-12);
  const std::vector<int> p{0, 0, 0, 1, 1, 1}, q{0, 1, 2, 0, 1, 2};
  EXPECT_LT(adjusted_rand_index(p, q), 0.0);
}

TEST(Ari, Contingency) {
  const std::vector<int> a{0, 0, 1, 1, 2}, b{1, 1, 0, 1, 0};
  const Matrix t = contingency_table(a, b);
  EXPECT_EQ(t, (Matrix{{0, 2}, {1, 1}, {1, 0}}));
}

TEST(Separation, IntraAndInterMeans) {
  const Matrix d{{0, 1, 4}, {1, 0, 6}, {4, 6, 0}};
  const std::vector<int> fam{0, 0, 1};
  const FamilySeparation s = family_separation(d, fam);
  EXPECT_DOUBLE_EQ(s.intra, 1.0);
  EXPECT_DOUBLE_EQ(s.inter, 5.0);
}

TEST(Writers, CsvSvgJson) {
  SignatureMatrix s = from_rows({{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}});
  s.names = {"a", "b", "c"};
  s.families = {0, 1, 0};
  const Matrix d = pairwise_distance(s, Metric::euclidean);
  const std::string csv = distance_csv(d, s.names);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class,a,b,c");
  const std::string svg = scatter_svg(project_2d(s.rows), s);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  std::size_t circles = 0;
  for (std::size_t pos = 0; (pos = svg.find("<circle", pos)) != std::string::npos; ++pos) ++circles;
  EXPECT_EQ(circles, 3u);
  const auto j = clustering_json(agglomerate(d, 2), s);
  EXPECT_EQ(j.at("merges").size(), 2u);
  EXPECT_EQ(j.at("assignment").size(), 3u);
}

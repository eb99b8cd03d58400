#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subnetscope/extract.hpp"

namespace subnetscope {

using Matrix = std::vector<std::vector<double>>;

/// One row per class: the concatenated gate vector of its subnetwork.
struct SignatureMatrix {
  Matrix rows;
  std::vector<int> classes;
  std::vector<int> families;
  std::vector<std::string> names;
};

/// Row c is bundle c's (post-threshold) gate vector. `families` and `names`
/// may be empty.
SignatureMatrix build_signatures(std::span<const SubnetworkBundle> bundles, std::size_t num_classes,
                                 std::span<const int> families = {}, std::span<const std::string> names = {});

enum class Metric { cosine, euclidean };
std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view name);

/// Symmetric distance matrix with zero diagonal. Cosine distance is
/// 1 - u.v / (|u| |v|) and rejects all-zero rows.
Matrix pairwise_distance(const SignatureMatrix& sig, Metric metric);

struct Merge {
  std::size_t a = 0;         // cluster ids: leaves are 0..K-1, merge i creates K+i
  std::size_t b = 0;
  double distance = 0.0;
  std::size_t size = 0;      // leaves under the new cluster
};

struct Dendrogram {
  std::vector<Merge> merges;           // K-1 entries
  std::vector<std::size_t> leaf_order;
};

struct Clustering {
  Dendrogram dendrogram;
  std::vector<int> assignment;  // flat labels 0..n_clusters-1, numbered by first member
};

/// Average-linkage agglomeration; the flat cut stops after K - n_clusters merges.
Clustering agglomerate(const Matrix& dist, std::size_t n_clusters);

struct Projection {
  Matrix coords;                     // K x 2
  std::array<double, 2> variance{};  // eigenvalues of the row covariance
  Matrix components;                 // 2 x D unit loadings
  std::array<std::size_t, 2> iterations{};
};

/// PCA onto the top two principal directions via power iteration with
/// deflation on the centred Gram matrix. Each loading vector is signed so its
/// largest-magnitude entry is positive.
Projection project_2d(const Matrix& rows, double tolerance = 1e-9, std::size_t max_iterations = 1000);

struct FamilySeparation {
  double intra = 0.0;  // mean distance over same-family pairs
  double inter = 0.0;  // mean distance over cross-family pairs
};
FamilySeparation family_separation(const Matrix& dist, std::span<const int> families);

Matrix contingency_table(std::span<const int> a, std::span<const int> b);
/// Hubert-Arabie adjusted Rand index.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

std::string distance_csv(const Matrix& dist, std::span<const std::string> names);
std::string scatter_svg(const Projection& proj, const SignatureMatrix& sig);
nlohmann::json clustering_json(const Clustering& c, const SignatureMatrix& sig);

}  // namespace subnetscope

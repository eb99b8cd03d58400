#include "subnetscope/signature.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "subnetscope/error.hpp"

namespace subnetscope {

using json = nlohmann::json;

std::string_view to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

Metric metric_from_string(std::string_view name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

SignatureMatrix build_signatures(std::span<const SubnetworkBundle> bundles, std::size_t num_classes,
                                 std::span<const int> families, std::span<const std::string> names) {
  SignatureMatrix sig;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto it = std::find_if(bundles.begin(), bundles.end(),
                           [c](const SubnetworkBundle& b) { return b.class_id == static_cast<int>(c); });
    if (it == bundles.end()) throw DataError("build_signatures: missing bundle for class " + std::to_string(c));
    std::vector<double> row = it->gates.flat();
    if (!sig.rows.empty() && row.size() != sig.rows.front().size()) {
      throw ShapeError("build_signatures: class " + std::to_string(c) + " has " + std::to_string(row.size()) +
                       " gates, expected " + std::to_string(sig.rows.front().size()));
    }
    sig.rows.push_back(std::move(row));
    sig.classes.push_back(static_cast<int>(c));
    sig.families.push_back(c < families.size() ? families[c] : 0);
    sig.names.push_back(c < names.size() ? names[c] : "class" + std::to_string(c));
  }
  return sig;
}

Matrix pairwise_distance(const SignatureMatrix& sig, Metric metric) {
  const std::size_t k = sig.rows.size();
  std::vector<double> norms(k);
  for (std::size_t i = 0; i < k; ++i) {
    norms[i] = std::sqrt(std::inner_product(sig.rows[i].begin(), sig.rows[i].end(), sig.rows[i].begin(), 0.0));
    if (metric == Metric::cosine && norms[i] == 0.0) {
      throw DataError("cosine distance undefined: signature of " + sig.names[i] + " is all zero");
    }
  }
  Matrix d(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      double v = 0.0;
      if (metric == Metric::cosine) {
        const double dot = std::inner_product(sig.rows[i].begin(), sig.rows[i].end(), sig.rows[j].begin(), 0.0);
        v = std::max(0.0, 1.0 - dot / (norms[i] * norms[j]));
      } else {
        for (std::size_t t = 0; t < sig.rows[i].size(); ++t) {
          const double e = sig.rows[i][t] - sig.rows[j][t];
          v += e * e;
        }
        v = std::sqrt(v);
      }
      d[i][j] = d[j][i] = v;
    }
  return d;
}

Clustering agglomerate(const Matrix& dist, std::size_t n_clusters) {
  const std::size_t k = dist.size();
  if (k == 0) throw DataError("agglomerate: empty distance matrix");
  for (const auto& row : dist)
    if (row.size() != k) throw ShapeError("agglomerate: distance matrix is not square");
  if (n_clusters < 1 || n_clusters > k) {
    throw ConfigError("agglomerate: n_clusters " + std::to_string(n_clusters) + " outside [1, " + std::to_string(k) + "]");
  }

  // Active clusters keyed by id; Lance-Williams update for average linkage.
  std::vector<std::size_t> active(k);
  std::iota(active.begin(), active.end(), std::size_t{0});
  std::map<std::size_t, std::size_t> size;
  std::map<std::size_t, std::vector<std::size_t>> members;
  std::map<std::pair<std::size_t, std::size_t>, double> d;
  for (std::size_t i = 0; i < k; ++i) {
    size[i] = 1;
    members[i] = {i};
    for (std::size_t j = i + 1; j < k; ++j) d[{i, j}] = dist[i][j];
  }
  auto dget = [&](std::size_t a, std::size_t b) { return d.at({std::min(a, b), std::max(a, b)}); };

  Clustering out;
  std::vector<int> assignment;
  auto snapshot = [&] {
    // Flat labels numbered in order of each cluster's smallest leaf.
    std::vector<std::pair<std::size_t, std::size_t>> order;  // (min leaf, cluster id)
    for (std::size_t id : active) order.emplace_back(*std::min_element(members[id].begin(), members[id].end()), id);
    std::sort(order.begin(), order.end());
    assignment.assign(k, 0);
    for (std::size_t lab = 0; lab < order.size(); ++lab)
      for (std::size_t leaf : members[order[lab].second]) assignment[leaf] = static_cast<int>(lab);
  };
  if (n_clusters == k) snapshot();

  std::map<std::size_t, std::pair<std::size_t, std::size_t>> children;
  for (std::size_t step = 0; step + 1 < k; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (std::size_t x = 0; x < active.size(); ++x)
      for (std::size_t y = x + 1; y < active.size(); ++y) {
        const double v = dget(active[x], active[y]);
        if (v < best) {
          best = v;
          ba = active[x];
          bb = active[y];
        }
      }
    const std::size_t id = k + step;
    size[id] = size[ba] + size[bb];
    members[id] = members[ba];
    members[id].insert(members[id].end(), members[bb].begin(), members[bb].end());
    children[id] = {ba, bb};
    for (std::size_t other : active) {
      if (other == ba || other == bb) continue;
      const double v = (static_cast<double>(size[ba]) * dget(ba, other) + static_cast<double>(size[bb]) * dget(bb, other)) /
                       static_cast<double>(size[id]);
      d[{std::min(id, other), std::max(id, other)}] = v;
    }
    std::erase(active, ba);
    std::erase(active, bb);
    active.push_back(id);
    out.dendrogram.merges.push_back({ba, bb, best, size[id]});
    if (active.size() == n_clusters) snapshot();
  }

  std::function<void(std::size_t)> walk = [&](std::size_t id) {
    if (id < k) {
      out.dendrogram.leaf_order.push_back(id);
      return;
    }
    walk(children[id].first);
    walk(children[id].second);
  };
  walk(k == 1 ? 0 : 2 * k - 2);
  out.assignment = std::move(assignment);
  return out;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (double& e : v) e /= n;
}

std::vector<double> matvec(const Matrix& m, const std::vector<double>& v) {
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = dot(m[i], v);
  return out;
}

// Shifted inverse iteration step: solves (m - shift I) y = u with partial
// pivoting and returns y normalised. A singular pivot means the shift is an
// exact eigenvalue, so it is nudged rather than treated as an error.
std::vector<double> inverse_step(const Matrix& m, double shift, const std::vector<double>& u) {
  const std::size_t n = m.size();
  Matrix a = m;
  std::vector<double> y = u;
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a[i][i] -= shift;
    for (double e : a[i]) scale = std::max(scale, std::abs(e));
  }
  const double tiny = std::numeric_limits<double>::epsilon() * std::max(scale, 1e-300);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(y[c], y[piv]);
    if (std::abs(a[c][c]) < tiny) a[c][c] = a[c][c] < 0 ? -tiny : tiny;
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t t = c; t < n; ++t) a[r][t] -= f * a[c][t];
      y[r] -= f * y[c];
    }
  }
  for (std::size_t c = n; c-- > 0;) {
    for (std::size_t t = c + 1; t < n; ++t) y[c] -= a[c][t] * y[t];
    y[c] /= a[c][c];
  }
  normalize(y);
  return y;
}

}  // namespace

Projection project_2d(const Matrix& rows, double tolerance, std::size_t max_iterations) {
  const std::size_t k = rows.size();
  if (k < 2) throw DataError("project_2d: need at least 2 rows");
  const std::size_t dim = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != dim) throw ShapeError("project_2d: ragged rows");

  Matrix x = rows;
  for (std::size_t j = 0; j < dim; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < k; ++i) mu += x[i][j];
    mu /= static_cast<double>(k);
    for (std::size_t i = 0; i < k; ++i) x[i][j] -= mu;
  }
  // Gram dual: eigenpairs of X X^T / (K-1) share eigenvalues with the covariance.
  Matrix gram(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) gram[i][j] = dot(x[i], x[j]) / static_cast<double>(k - 1);
  double trace = 0.0;
  for (std::size_t i = 0; i < k; ++i) trace += gram[i][i];
  const double negligible = 1e-12 * std::max(trace, std::numeric_limits<double>::min());

  Projection proj;
  proj.coords.assign(k, std::vector<double>(2, 0.0));
  std::vector<std::vector<double>> found_u;
  for (std::size_t comp = 0; comp < 2; ++comp) {
    // Start from the row with the largest remaining self-similarity.
    std::size_t start = 0;
    for (std::size_t i = 1; i < k; ++i)
      if (gram[i][i] > gram[start][start]) start = i;
    std::vector<double> u(k, 0.0);
    u[start] = 1.0;
    double lambda = 0.0;
    bool converged = false;
    bool degenerate = false;
    std::size_t it = 0;
    double residual = 0.0;
    for (; it < max_iterations; ++it) {
      std::vector<double> w = matvec(gram, u);
      lambda = dot(u, w);
      const double wn = std::sqrt(dot(w, w));
      if (wn <= negligible) {
        degenerate = true;
        break;
      }
      residual = 0.0;
      for (std::size_t i = 0; i < k; ++i) residual += (w[i] - lambda * u[i]) * (w[i] - lambda * u[i]);
      residual = std::sqrt(residual);
      for (double& e : w) e /= wn;
      u = std::move(w);
      if (residual <= tolerance * std::max(lambda, 1.0)) {
        converged = true;
        break;
      }
    }
    proj.iterations[comp] = it + 1;
    std::vector<double> v(dim, 0.0);
    if (degenerate || lambda <= negligible) {
      // No variance left: any unit direction orthogonal to the earlier loading.
      lambda = std::max(lambda, 0.0);
      for (std::size_t e = 0; e < dim; ++e) {
        std::vector<double> cand(dim, 0.0);
        cand[e] = 1.0;
        for (const auto& prev : proj.components) {
          const double p = dot(cand, prev);
          for (std::size_t t = 0; t < dim; ++t) cand[t] -= p * prev[t];
        }
        if (dot(cand, cand) > 1e-12) {
          normalize(cand);
          v = std::move(cand);
          break;
        }
      }
    } else {
      if (!converged) {
        throw NumericError("project_2d: power iteration did not converge after " + std::to_string(max_iterations) +
                           " iterations (residual " + std::to_string(residual) + ")");
      }
      // The residual test bounds the eigenvector error only by residual/gap,
      // so polish with two shifted inverse steps.
      for (int step = 0; step < 2; ++step) {
        std::vector<double> y = inverse_step(gram, lambda, u);
        if (dot(y, u) < 0) for (double& e : y) e = -e;
        u = std::move(y);
        lambda = dot(u, matvec(gram, u));
      }
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t t = 0; t < dim; ++t) v[t] += u[i] * x[i][t];
      normalize(v);
      // Deflate.
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) gram[i][j] -= lambda * u[i] * u[j];
    }
    std::size_t arg = 0;
    for (std::size_t t = 1; t < dim; ++t)
      if (std::abs(v[t]) > std::abs(v[arg])) arg = t;
    if (v[arg] < 0) for (double& e : v) e = -e;
    proj.variance[comp] = lambda;
    for (std::size_t i = 0; i < k; ++i) proj.coords[i][comp] = dot(x[i], v);
    proj.components.push_back(std::move(v));
  }
  return proj;
}

FamilySeparation family_separation(const Matrix& dist, std::span<const int> families) {
  double intra = 0.0, inter = 0.0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t i = 0; i < dist.size(); ++i)
    for (std::size_t j = i + 1; j < dist.size(); ++j) {
      if (families[i] == families[j]) {
        intra += dist[i][j];
        ++ni;
      } else {
        inter += dist[i][j];
        ++ne;
      }
    }
  return {ni ? intra / static_cast<double>(ni) : 0.0, ne ? inter / static_cast<double>(ne) : 0.0};
}

Matrix contingency_table(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ShapeError("contingency_table: label vectors differ in length");
  const int ra = a.empty() ? 0 : *std::max_element(a.begin(), a.end()) + 1;
  const int rb = b.empty() ? 0 : *std::max_element(b.begin(), b.end()) + 1;
  Matrix t(static_cast<std::size_t>(ra), std::vector<double>(static_cast<std::size_t>(rb), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) t[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])] += 1.0;
  return t;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  const Matrix t = contingency_table(a, b);
  auto pairs = [](double n) { return n * (n - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  std::vector<double> col(t.empty() ? 0 : t[0].size(), 0.0);
  for (const auto& row : t) {
    double r = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      index += pairs(row[j]);
      r += row[j];
      col[j] += row[j];
    }
    sa += pairs(r);
  }
  for (double c : col) sb += pairs(c);
  const double total = pairs(static_cast<double>(a.size()));
  const double expected = total > 0 ? sa * sb / total : 0.0;
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

std::string distance_csv(const Matrix& dist, std::span<const std::string> names) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "class";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < dist.size(); ++i) {
    os << names[i];
    for (double v : dist[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

std::string scatter_svg(const Projection& proj, const SignatureMatrix& sig) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr double kSize = 480.0, kMargin = 60.0;
  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  for (const auto& c : proj.coords)
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], c[static_cast<std::size_t>(a)]);
      hi[a] = std::max(hi[a], c[static_cast<std::size_t>(a)]);
    }
  auto place = [&](double v, int a) {
    const double span = hi[a] - lo[a] > 0 ? hi[a] - lo[a] : 1.0;
    const double t = (v - lo[a]) / span;
    return a == 0 ? kMargin + t * (kSize - 2 * kMargin) : kSize - kMargin - t * (kSize - 2 * kMargin);
  };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < proj.coords.size(); ++i) {
    const double x = place(proj.coords[i][0], 0), y = place(proj.coords[i][1], 1);
    const char* color = palette[static_cast<std::size_t>(sig.families[i]) % std::size(palette)];
    os << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"8\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << x + 11 << "\" y=\"" << y + 4 << "\" font-family=\"sans-serif\" font-size=\"13\">"
       << sig.names[i] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json clustering_json(const Clustering& c, const SignatureMatrix& sig) {
  json merges = json::array();
  for (const auto& m : c.dendrogram.merges) {
    merges.push_back({{"a", m.a}, {"b", m.b}, {"distance", m.distance}, {"size", m.size}});
  }
  return json{{"classes", sig.names},
              {"families", sig.families},
              {"merges", std::move(merges)},
              {"leaf_order", c.dendrogram.leaf_order},
              {"assignment", c.assignment}};
}

}  // namespace subnetscope

#include "subnetscope/advdetect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "subnetscope/error.hpp"

namespace subnetscope {

using json = nlohmann::json;

namespace {

constexpr std::string_view kAdvMagic = "SSAD";
constexpr std::uint32_t kAdvVersion = 1;

Tensor rows_of(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t per = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(x.data().begin() + static_cast<long>(idx[k] * per), per, out.data().begin() + static_cast<long>(k * per));
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
  std::vector<std::size_t> idx(len);
  std::iota(idx.begin(), idx.end(), start);
  return rows_of(x, idx);
}

// d(sum_i CE_i)/dx for the given labels.
Tensor loss_gradient(const ModelSpec& spec, const Weights& weights, const Tensor& x, std::span<const int> y) {
  Tape tape;
  const WeightVars wv = bind_weights(tape, weights, false);
  Var xv = tape.variable(x);
  Var logits = forward(tape, spec, wv, xv, nullptr);
  Var loss = ops::softmax_cross_entropy(logits, y);
  return tape.backward(loss).at(xv);
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Attacks

std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::bim: return "bim";
    case AttackKind::deepfool: return "deepfool";
  }
  return "?";
}

AttackKind attack_kind_from_string(std::string_view name) {
  for (AttackKind k : {AttackKind::fgsm, AttackKind::bim, AttackKind::deepfool})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

AttackSpec AttackSpec::defaults(AttackKind kind) {
  AttackSpec s;
  s.kind = kind;
  if (kind == AttackKind::bim) s.steps = 10;
  if (kind == AttackKind::deepfool) s.steps = 50;
  return s;
}

void AttackSpec::validate() const {
  if (kind != AttackKind::deepfool && !(epsilon > 0.0)) throw ConfigError("attack epsilon must be > 0");
  if (steps < 1) throw ConfigError("attack steps must be >= 1");
  if (!(overshoot >= 0.0)) throw ConfigError("deepfool overshoot must be >= 0");
  if (!(clip_lo < clip_hi)) throw ConfigError("attack clip range is empty");
}

AttackResult attack(const AttackSpec& spec, const ModelSpec& model, const Weights& weights, const Tensor& x,
                    std::span<const int> y) {
  spec.validate();
  if (x.rank() != 4 || x.dim(0) != y.size()) throw ShapeError("attack: need N x C x H x W input and N labels");
  for (int label : y)
    if (label < 0 || static_cast<std::size_t>(label) >= model.num_classes) {
      throw DataError("attack: label " + std::to_string(label) + " out of range");
    }
  const std::size_t n = x.dim(0), per = x.numel() / n, k = model.num_classes;
  auto clip = [&](double v) { return std::clamp(v, spec.clip_lo, spec.clip_hi); };

  AttackResult res;
  res.clean_pred = argmax_rows(forward(model, weights, x));
  Tensor adv = x;
  switch (spec.kind) {
    case AttackKind::fgsm: {
      const Tensor g = loss_gradient(model, weights, x, y);
      for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] = clip(x[i] + spec.epsilon * sign(g[i]));
      break;
    }
    case AttackKind::bim: {
      const double step = spec.epsilon / static_cast<double>(spec.steps);
      for (std::size_t t = 0; t < spec.steps; ++t) {
        const Tensor g = loss_gradient(model, weights, adv, y);
        for (std::size_t i = 0; i < adv.numel(); ++i) {
          const double v = std::clamp(adv[i] + step * sign(g[i]), x[i] - spec.epsilon, x[i] + spec.epsilon);
          adv[i] = clip(v);
        }
      }
      break;
    }
    case AttackKind::deepfool: {
      std::vector<double> r_tot(x.numel(), 0.0);
      std::vector<std::size_t> active(n);
      std::iota(active.begin(), active.end(), std::size_t{0});
      for (std::size_t it = 0; it < spec.steps && !active.empty(); ++it) {
        const Tensor xa = rows_of(adv, active);
        Tape tape;
        const WeightVars wv = bind_weights(tape, weights, false);
        Var xv = tape.variable(xa);
        Var logits = forward(tape, model, wv, xv, nullptr);
        const Tensor f = tape.value(logits);
        std::vector<Tensor> grads;
        for (std::size_t c = 0; c < k; ++c) {
          Tensor seed(f.shape(), 0.0);
          for (std::size_t a = 0; a < active.size(); ++a) seed[a * k + c] = 1.0;
          grads.push_back(tape.backward(logits, seed).at(xv));
        }
        std::vector<std::size_t> still;
        for (std::size_t a = 0; a < active.size(); ++a) {
          const std::size_t i = active[a];
          const std::size_t k0 = static_cast<std::size_t>(res.clean_pred[i]);
          const double* row = f.data().data() + a * k;
          if (static_cast<std::size_t>(std::max_element(row, row + k) - row) != k0) continue;  // already fooled
          double best = std::numeric_limits<double>::infinity();
          std::size_t best_c = k;
          double best_fk = 0.0, best_norm2 = 0.0;
          for (std::size_t c = 0; c < k; ++c) {
            if (c == k0) continue;
            double norm2 = 0.0;
            for (std::size_t p = 0; p < per; ++p) {
              const double w = grads[c][a * per + p] - grads[k0][a * per + p];
              norm2 += w * w;
            }
            if (norm2 == 0.0) continue;
            const double fk = row[c] - row[k0];
            const double dist = std::abs(fk) / std::sqrt(norm2);
            if (dist < best) {
              best = dist;
              best_c = c;
              best_fk = fk;
              best_norm2 = norm2;
            }
          }
          if (best_c == k) continue;  // flat logits, nothing to follow
          const double scale = (std::abs(best_fk) + 1e-4) / best_norm2;
          for (std::size_t p = 0; p < per; ++p) {
            const double w = grads[best_c][a * per + p] - grads[k0][a * per + p];
            r_tot[i * per + p] += scale * w;
            adv[i * per + p] = clip(x[i * per + p] + (1.0 + spec.overshoot) * r_tot[i * per + p]);
          }
          still.push_back(i);
        }
        active = std::move(still);
      }
      break;
    }
  }
  res.adv_pred = argmax_rows(forward(model, weights, adv));
  res.success.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.success[i] = res.adv_pred[i] != res.clean_pred[i];
  res.x_adv = std::move(adv);
  return res;
}

// ---------------------------------------------------------------------------
// Gaussian scoring

std::string_view to_string(DetectorMode m) { return m == DetectorMode::full_model ? "full_model" : "subnet"; }

std::vector<Tensor> layer_features(const ModelSpec& spec, const Weights& weights, const GateVector* gates,
                                   const Tensor& x, std::size_t batch) {
  const std::size_t n = x.dim(0);
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    Tape tape;
    const WeightVars wv = bind_weights(tape, weights, false);
    std::vector<Var> gv;
    if (gates) gv = bind_gates(tape, spec, *gates, false);
    ForwardTrace trace;
    forward(tape, spec, wv, tape.constant(slice_rows(x, start, len)), gates ? &gv : nullptr, &trace);
    if (out.empty()) {
      for (Var b : trace.block_outputs) out.emplace_back(Shape{n, tape.value(b).dim(1)});
    }
    for (std::size_t l = 0; l < trace.block_outputs.size(); ++l) {
      const Tensor& v = tape.value(trace.block_outputs[l]);
      const std::size_t d = v.dim(1);
      const std::size_t area = v.numel() / (len * d);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t c = 0; c < d; ++c) {
          double s = 0.0;
          const double* p = v.data().data() + (i * d + c) * area;
          for (std::size_t q = 0; q < area; ++q) s += p[q];
          out[l][(start + i) * d + c] = s / static_cast<double>(area);
        }
    }
  }
  return out;
}

namespace {

std::vector<std::vector<double>> cholesky(const std::vector<std::vector<double>>& a) {
  const std::size_t d = a.size();
  std::vector<std::vector<double>> l(d, std::vector<double>(d, 0.0));
  for (std::size_t j = 0; j < d; ++j) {
    double diag = a[j][j];
    for (std::size_t k = 0; k < j; ++k) diag -= l[j][k] * l[j][k];
    if (!(diag > 0.0)) return {};
    l[j][j] = std::sqrt(diag);
    for (std::size_t i = j + 1; i < d; ++i) {
      double s = a[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = s / l[j][j];
    }
  }
  return l;
}

}  // namespace

MahalanobisStats fit_gaussian(std::span<const Tensor> features, std::span<const int> labels, std::size_t num_classes) {
  MahalanobisStats stats;
  stats.class_counts.assign(num_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw DataError("fit: label out of range");
    ++stats.class_counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < num_classes; ++c)
    if (stats.class_counts[c] == 0) throw DataError("fit: class " + std::to_string(c) + " has no samples");
  stats.total = labels.size();

  for (std::size_t l = 0; l < features.size(); ++l) {
    const Tensor& f = features[l];
    if (f.rank() != 2 || f.dim(0) != labels.size()) throw ShapeError("fit: feature rows do not match labels");
    const std::size_t d = f.dim(1);
    LayerStats ls;
    ls.means.assign(num_classes, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) ls.means[static_cast<std::size_t>(labels[i])][j] += f[i * d + j];
    for (std::size_t c = 0; c < num_classes; ++c)
      for (double& v : ls.means[c]) v /= static_cast<double>(stats.class_counts[c]);
    ls.covariance.assign(d, std::vector<double>(d, 0.0));
    std::vector<double> diff(d);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& mu = ls.means[static_cast<std::size_t>(labels[i])];
      for (std::size_t j = 0; j < d; ++j) diff[j] = f[i * d + j] - mu[j];
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b <= a; ++b) ls.covariance[a][b] += diff[a] * diff[b];
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b <= a; ++b) {
        ls.covariance[a][b] /= static_cast<double>(labels.size());
        ls.covariance[b][a] = ls.covariance[a][b];
      }
      trace += ls.covariance[a][a];
    }
    // Trace-scaled ridge; a zero covariance still gets a unit-scale ridge.
    ls.delta = trace > 0.0 ? 1e-6 * trace / static_cast<double>(d) : 1e-6;
    auto reg = ls.covariance;
    for (std::size_t a = 0; a < d; ++a) reg[a][a] += ls.delta;
    ls.cholesky = cholesky(reg);
    if (ls.cholesky.empty()) {
      throw NumericError("covariance factorization failed at layer " + std::to_string(l) + " (delta " +
                         std::to_string(ls.delta) + ")");
    }
    stats.layers.push_back(std::move(ls));
  }
  return stats;
}

MahalanobisStats fit_mahalanobis(const ModelSpec& spec, const Weights& weights,
                                 const std::vector<SubnetworkBundle>* bundles, const LabeledSet& train,
                                 std::size_t batch) {
  const std::size_t k = spec.num_classes;
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const int y = train[i].label;
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw DataError("fit_mahalanobis: label out of range");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  // Class-grouped passes in both modes so identity gates reproduce the full model exactly.
  std::vector<Tensor> feats;
  std::vector<int> labels;
  std::vector<std::vector<Tensor>> parts;
  for (std::size_t c = 0; c < k; ++c) {
    if (by_class[c].empty()) throw DataError("fit_mahalanobis: class " + std::to_string(c) + " has no samples");
    const GateVector* gates = nullptr;
    if (bundles) {
      auto it = std::find_if(bundles->begin(), bundles->end(),
                             [c](const SubnetworkBundle& b) { return b.class_id == static_cast<int>(c); });
      if (it == bundles->end()) throw DataError("fit_mahalanobis: no subnetwork for class " + std::to_string(c));
      gates = &it->gates;
    }
    parts.push_back(layer_features(spec, weights, gates, stack_images(train, by_class[c]), batch));
    labels.insert(labels.end(), by_class[c].size(), static_cast<int>(c));
  }
  for (std::size_t l = 0; l < parts.front().size(); ++l) {
    const std::size_t d = parts.front()[l].dim(1);
    Tensor all(Shape{labels.size(), d});
    std::size_t row = 0;
    for (const auto& p : parts) {
      std::copy(p[l].data().begin(), p[l].data().end(), all.data().begin() + static_cast<long>(row * d));
      row += p[l].dim(0);
    }
    feats.push_back(std::move(all));
  }
  MahalanobisStats stats = fit_gaussian(feats, labels, k);
  stats.mode = bundles ? DetectorMode::subnet : DetectorMode::full_model;
  return stats;
}

namespace {

double neg_quad(const LayerStats& s, std::span<const double> f, std::size_t c) {
  const auto& l = s.cholesky;
  const std::size_t d = l.size();
  std::vector<double> z(d);
  double q = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double v = f[i] - s.means[c][i];
    for (std::size_t j = 0; j < i; ++j) v -= l[i][j] * z[j];
    z[i] = v / l[i][i];
    q += z[i] * z[i];
  }
  return -q;
}

}  // namespace

double mahalanobis_max(const LayerStats& stats, std::span<const double> f) {
  if (f.size() != stats.cholesky.size()) throw ShapeError("mahalanobis: feature dimension mismatch");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < stats.means.size(); ++c) best = std::max(best, neg_quad(stats, f, c));
  return best;
}

double mahalanobis_max(const LayerStats& stats, const std::vector<std::vector<double>>& per_class_f) {
  if (per_class_f.size() != stats.means.size()) throw ShapeError("mahalanobis: one feature vector per class required");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < stats.means.size(); ++c) {
    if (per_class_f[c].size() != stats.cholesky.size()) throw ShapeError("mahalanobis: feature dimension mismatch");
    best = std::max(best, neg_quad(stats, per_class_f[c], c));
  }
  return best;
}

std::vector<std::vector<double>> mahalanobis_score(const MahalanobisStats& stats, const ModelSpec& spec,
                                                   const Weights& weights, const std::vector<SubnetworkBundle>* bundles,
                                                   const Tensor& x, bool per_class_features, std::size_t batch) {
  const bool subnet = bundles != nullptr;
  if (subnet != (stats.mode == DetectorMode::subnet)) {
    throw ConfigError(std::string("mahalanobis_score: stats fitted in ") + std::string(to_string(stats.mode)) +
                      " mode but scoring " + (subnet ? "with" : "without") + " subnetworks");
  }
  const std::size_t n = x.dim(0), k = spec.num_classes, layers = stats.layers.size();
  std::vector<std::vector<double>> scores(n, std::vector<double>(layers));
  auto row = [](const Tensor& t, std::size_t i) {
    const std::size_t d = t.dim(1);
    return std::vector<double>(t.data().begin() + static_cast<long>(i * d), t.data().begin() + static_cast<long>((i + 1) * d));
  };
  if (!subnet) {
    const auto f = layer_features(spec, weights, nullptr, x, batch);
    if (f.size() != layers) throw ShapeError("mahalanobis_score: layer count mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < layers; ++l) {
        const std::vector<std::vector<double>> same(k, row(f[l], i));
        scores[i][l] = mahalanobis_max(stats.layers[l], same);
      }
    return scores;
  }
  std::vector<std::vector<Tensor>> per_class(k);
  for (std::size_t c = 0; c < k; ++c) {
    auto it = std::find_if(bundles->begin(), bundles->end(),
                           [c](const SubnetworkBundle& b) { return b.class_id == static_cast<int>(c); });
    if (it == bundles->end()) throw DataError("mahalanobis_score: no subnetwork for class " + std::to_string(c));
    per_class[c] = layer_features(spec, weights, &it->gates, x, batch);
  }
  std::vector<int> pred;
  if (!per_class_features) pred = argmax_rows(forward(spec, weights, x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<std::vector<double>> fs(k);
      for (std::size_t c = 0; c < k; ++c) {
        const std::size_t src = per_class_features ? c : static_cast<std::size_t>(pred[i]);
        fs[c] = row(per_class[src][l], i);
      }
      scores[i][l] = mahalanobis_max(stats.layers[l], fs);
    }
  return scores;
}

// ---------------------------------------------------------------------------
// Detector

double LogisticDetector::predict(std::span<const double> features) const {
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * (features[j] - mean[j]) / stdev[j];
  return 1.0 / (1.0 + std::exp(-z));
}

std::vector<double> LogisticDetector::predict(const std::vector<std::vector<double>>& rows) const {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(predict(r));
  return out;
}

LogisticDetector train_detector(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                                const DetectorConfig& config) {
  if (features.size() != labels.size() || features.empty()) throw ShapeError("train_detector: features/labels mismatch");
  const bool has0 = std::find(labels.begin(), labels.end(), 0) != labels.end();
  const bool has1 = std::find(labels.begin(), labels.end(), 1) != labels.end();
  if (!has0 || !has1) throw DataError("train_detector: training fold contains a single label");
  const std::size_t n = features.size(), d = features.front().size();
  LogisticDetector det;
  det.mean.assign(d, 0.0);
  det.stdev.assign(d, 0.0);
  for (const auto& r : features)
    for (std::size_t j = 0; j < d; ++j) det.mean[j] += r[j];
  for (double& m : det.mean) m /= static_cast<double>(n);
  for (const auto& r : features)
    for (std::size_t j = 0; j < d; ++j) det.stdev[j] += (r[j] - det.mean[j]) * (r[j] - det.mean[j]);
  for (double& s : det.stdev) {
    s = std::sqrt(s / static_cast<double>(n));
    if (!(s > 0.0)) s = 1.0;
  }
  std::vector<std::vector<double>> z(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (features[i][j] - det.mean[j]) / det.stdev[j];

  det.weights.assign(d, 0.0);
  std::vector<double> gw(d);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = det.bias;
      for (std::size_t j = 0; j < d; ++j) s += det.weights[j] * z[i][j];
      const double err = 1.0 / (1.0 + std::exp(-s)) - static_cast<double>(labels[i]);
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * z[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) {
      det.weights[j] -= config.lr * (gw[j] / static_cast<double>(n) + config.l2 * det.weights[j]);
    }
    det.bias -= config.lr * gb / static_cast<double>(n);
  }
  return det;
}

double auroc(std::span<const double> positive, std::span<const double> negative) {
  if (positive.empty() || negative.empty()) throw DataError("auroc: empty score set");
  // Mann-Whitney U with mid-ranks.
  std::vector<std::pair<double, int>> all;
  for (double v : positive) all.emplace_back(v, 1);
  for (double v : negative) all.emplace_back(v, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t pos = 0;
    while (j < all.size() && all[j].first == all[i].first) pos += static_cast<std::size_t>(all[j++].second);
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    rank_sum += mid * static_cast<double>(pos);
    i = j;
  }
  const double np = static_cast<double>(positive.size()), nn = static_cast<double>(negative.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------
// Suite

namespace {

struct Scored {
  std::vector<std::vector<double>> full;
  std::vector<std::vector<double>> subnet;
};

Scored score_both(const MahalanobisStats& full_stats, const MahalanobisStats& sub_stats, const ModelSpec& spec,
                  const Weights& weights, const std::vector<SubnetworkBundle>& bundles, const Tensor& x,
                  bool per_class) {
  return {mahalanobis_score(full_stats, spec, weights, nullptr, x, per_class),
          mahalanobis_score(sub_stats, spec, weights, &bundles, x, per_class)};
}

struct Fold {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
};

double fold_auroc(const LogisticDetector& det, const Fold& f) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < f.rows.size(); ++i) (f.labels[i] ? pos : neg).push_back(det.predict(f.rows[i]));
  return auroc(pos, neg);
}

}  // namespace

CandidatePool candidate_pool(const ModelSpec& spec, const Weights& weights, const LabeledSet& test,
                             const DetectionConfig& config) {
  // Deterministic subset of correctly classified test images.
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(config.seed, 0xadd));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), config.max_samples));
  std::sort(order.begin(), order.end());
  const Tensor pool = stack_images(test, order);
  const std::vector<int> pred = argmax_rows(forward(spec, weights, pool));
  std::vector<std::size_t> keep;
  CandidatePool out;
  for (std::size_t i = 0; i < order.size(); ++i)
    if (pred[i] == test[order[i]].label) {
      keep.push_back(i);
      out.test_ids.push_back(order[i]);
      out.labels.push_back(test[order[i]].label);
    }
  out.clean = rows_of(pool, keep);
  return out;
}

AdversarialSet craft_adversarial(const AttackSpec& as, const ModelSpec& spec, const Weights& weights,
                                 const CandidatePool& pool, std::size_t min_successful) {
  as.validate();
  const std::size_t m = pool.size();
  AttackResult ar;
  {
    // Chunked to bound tape memory.
    std::vector<Tensor> parts;
    for (std::size_t start = 0; start < m; start += 100) {
      const std::size_t len = std::min<std::size_t>(100, m - start);
      AttackResult part = attack(as, spec, weights, slice_rows(pool.clean, start, len),
                                 std::span<const int>(pool.labels).subspan(start, len));
      parts.push_back(std::move(part.x_adv));
      ar.success.insert(ar.success.end(), part.success.begin(), part.success.end());
    }
    ar.x_adv = Tensor(pool.clean.shape());
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), ar.x_adv.data().begin() + static_cast<long>(off));
      off += p.numel();
    }
  }
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < m; ++i)
    if (ar.success[i]) ok.push_back(i);
  if (ok.size() < min_successful) {
    std::ostringstream msg;
    msg << "attack " << to_string(as.kind) << ": only " << ok.size() << " of " << m
        << " attacks succeeded (success rate " << (m ? static_cast<double>(ok.size()) / static_cast<double>(m) : 0.0)
        << "), need " << min_successful;
    throw Error(msg.str());
  }
  return {as.kind, ok, rows_of(pool.clean, ok), rows_of(ar.x_adv, ok)};
}

DetectionReport evaluate_detection(const ModelSpec& spec, const Weights& weights,
                                   const std::vector<SubnetworkBundle>& bundles, const LabeledSet& train,
                                   const CandidatePool& pool, const std::vector<AdversarialSet>& sets,
                                   const DetectionConfig& config) {
  if (sets.empty()) throw ConfigError("detection: no attacks configured");
  DetectionReport report;
  report.config = config;
  const std::size_t m = pool.size();
  report.clean_candidates = m;

  // Pair id -> detector-train (true) or detector-test fold, shared by all attacks.
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 frng(mix_seed(config.seed, 0xf01d));
  std::shuffle(perm.begin(), perm.end(), frng);
  std::vector<bool> in_train(m, false);
  for (std::size_t k = 0; k < m / 2; ++k) in_train[perm[k]] = true;

  const MahalanobisStats full_stats = fit_mahalanobis(spec, weights, nullptr, train);
  const MahalanobisStats sub_stats = fit_mahalanobis(spec, weights, &bundles, train);
  const Scored clean_scores =
      score_both(full_stats, sub_stats, spec, weights, bundles, pool.clean, config.per_class_features);

  std::optional<LogisticDetector> ref_full, ref_sub;
  for (const AdversarialSet& set : sets) {
    const auto& ok = set.sample_ids;
    for (std::size_t id : ok)
      if (id >= m) throw DataError("detection: adversarial sample id outside the candidate pool");
    AttackRecord rec;
    rec.kind = set.kind;
    rec.attempted = m;
    rec.successful = ok.size();
    const Scored adv_scores =
        score_both(full_stats, sub_stats, spec, weights, bundles, set.adversarial, config.per_class_features);

    auto folds = [&](const std::vector<std::vector<double>>& cs, const std::vector<std::vector<double>>& vs) {
      std::pair<Fold, Fold> f;
      for (std::size_t k = 0; k < ok.size(); ++k) {
        Fold& dst = in_train[ok[k]] ? f.first : f.second;
        dst.rows.push_back(cs[ok[k]]);
        dst.labels.push_back(0);
        dst.rows.push_back(vs[k]);
        dst.labels.push_back(1);
      }
      return f;
    };
    const auto [tr_full, te_full] = folds(clean_scores.full, adv_scores.full);
    const auto [tr_sub, te_sub] = folds(clean_scores.subnet, adv_scores.subnet);
    rec.detector_train = tr_full.rows.size();
    rec.detector_test = te_full.rows.size();
    const LogisticDetector det_full = train_detector(tr_full.rows, tr_full.labels, config.detector);
    const LogisticDetector det_sub = train_detector(tr_sub.rows, tr_sub.labels, config.detector);
    rec.auroc_full = fold_auroc(det_full, te_full);
    rec.auroc_subnet = fold_auroc(det_sub, te_sub);
    if (!ref_full) {
      ref_full = det_full;
      ref_sub = det_sub;
    } else {
      rec.unknown_full = fold_auroc(*ref_full, te_full);
      rec.unknown_subnet = fold_auroc(*ref_sub, te_sub);
    }
    report.attacks.push_back(rec);
  }
  return report;
}

DetectionReport run_detection_suite(const ModelSpec& spec, const Weights& weights,
                                    const std::vector<SubnetworkBundle>& bundles, const LabeledSet& train,
                                    const LabeledSet& test, const DetectionConfig& config,
                                    std::vector<AdversarialSet>* adv_out) {
  if (config.attacks.empty()) throw ConfigError("detection: no attacks configured");
  for (const auto& a : config.attacks) a.validate();
  const CandidatePool pool = candidate_pool(spec, weights, test, config);
  std::vector<AdversarialSet> sets;
  for (const AttackSpec& as : config.attacks)
    sets.push_back(craft_adversarial(as, spec, weights, pool, config.min_successful));
  DetectionReport report = evaluate_detection(spec, weights, bundles, train, pool, sets, config);
  if (adv_out) *adv_out = std::move(sets);
  return report;
}

json detection_report_json(const DetectionReport& r) {
  json attacks = json::array();
  for (const auto& a : r.attacks) {
    json j{{"attack", to_string(a.kind)},
           {"attempted", a.attempted},
           {"successful", a.successful},
           {"success_rate", a.attempted ? static_cast<double>(a.successful) / static_cast<double>(a.attempted) : 0.0},
           {"detector_train", a.detector_train},
           {"detector_test", a.detector_test},
           {"auroc", {{"full_model", a.auroc_full}, {"subnet", a.auroc_subnet}}}};
    if (a.unknown_full) j["unknown_attack_auroc"] = {{"full_model", *a.unknown_full}, {"subnet", *a.unknown_subnet}};
    attacks.push_back(std::move(j));
  }
  json cfg_attacks = json::array();
  for (const auto& a : r.config.attacks) {
    cfg_attacks.push_back({{"kind", to_string(a.kind)},
                           {"epsilon", a.epsilon},
                           {"steps", a.steps},
                           {"overshoot", a.overshoot}});
  }
  return json{{"attacks", std::move(attacks)},
              {"clean_candidates", r.clean_candidates},
              {"config",
               {{"attacks", std::move(cfg_attacks)},
                {"max_samples", r.config.max_samples},
                {"min_successful", r.config.min_successful},
                {"per_class_features", r.config.per_class_features},
                {"seed", r.config.seed},
                {"detector",
                 {{"lr", r.config.detector.lr}, {"iterations", r.config.detector.iterations}, {"l2", r.config.detector.l2}}}}}};
}

std::string table2_csv(const DetectionReport& r, const std::string& dataset) {
  std::ostringstream os;
  os << "dataset,method,attack,block,auroc\n";
  for (const auto& a : r.attacks) {
    os << dataset << ",mahalanobis," << to_string(a.kind) << ",seen," << a.auroc_full << '\n';
    os << dataset << ",subnet_mahalanobis," << to_string(a.kind) << ",seen," << a.auroc_subnet << '\n';
  }
  for (const auto& a : r.attacks) {
    if (!a.unknown_full) continue;
    os << dataset << ",mahalanobis," << to_string(a.kind) << ",unseen," << *a.unknown_full << '\n';
    os << dataset << ",subnet_mahalanobis," << to_string(a.kind) << ",unseen," << *a.unknown_subnet << '\n';
  }
  return os.str();
}

void save_adversarial(const std::filesystem::path& path, const std::vector<AdversarialSet>& sets) {
  json header = json::array();
  for (const auto& s : sets) {
    header.push_back({{"attack", to_string(s.kind)}, {"sample_ids", s.sample_ids}, {"shape", s.clean.shape()}});
  }
  std::string out = io::begin_container(kAdvMagic, kAdvVersion, json{{"sets", header}}.dump());
  for (const auto& s : sets) {
    for (double v : s.clean.data()) io::put_f32(out, v);
    for (double v : s.adversarial.data()) io::put_f32(out, v);
  }
  io::write_file(path, out);
}

std::vector<AdversarialSet> load_adversarial(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path));
  std::vector<AdversarialSet> sets;
  try {
    const json header = json::parse(io::open_container(r, kAdvMagic, kAdvVersion));
    for (const auto& h : header.at("sets")) {
      AdversarialSet s;
      s.kind = attack_kind_from_string(h.at("attack").get<std::string>());
      s.sample_ids = h.at("sample_ids").get<std::vector<std::size_t>>();
      const Shape shape = h.at("shape").get<Shape>();
      if (shape.empty() || shape[0] != s.sample_ids.size()) throw LayoutError("adversarial set: shape/sample count mismatch");
      const std::size_t count = shape_numel(shape);
      r.need(count * 8, "adversarial payload");
      for (Tensor* t : {&s.clean, &s.adversarial}) {
        *t = Tensor(shape);
        for (std::size_t i = 0; i < count; ++i) (*t)[i] = r.f32_at(r.pos() + 4 * i);
        r.seek(r.pos() + 4 * count);
      }
      sets.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw LayoutError(std::string("adversarial header: ") + e.what());
  }
  return sets;
}

}  // namespace subnetscope

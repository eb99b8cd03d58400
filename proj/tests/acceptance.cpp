// End-to-end acceptance runner. Runs the default pipeline twice plus a few
// focused checks and prints one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--only 1,4,8] [--reuse]
//
// --reuse skips the first pipeline run and checks an existing WORK/run1.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include <spdlog/spdlog.h>

#include "gradcheck.hpp"
#include "pipeline.hpp"
#include "subnetscope/advdetect.hpp"
#include "subnetscope/explain.hpp"
#include "subnetscope/signature.hpp"

using namespace subnetscope;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, Outcome> results;

void record(int id, bool pass, const std::string& detail) {
  results[id] = {pass, detail};
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << id << ": " << detail << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

cli::RunConfig default_run(const fs::path& out) {
  cli::RunConfig c;
  c.output = out.string();
  c.workers = std::max(1u, std::thread::hardware_concurrency());
  return c;
}

double stage_seconds(const fs::path& out, const std::string& stage) {
  return read_json(out / "manifest.json").at("stages").at(stage).at("seconds");
}

// ---------------------------------------------------------------------------

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t checked = 0, failed = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto rep = gradcheck::random_network_check(seed);
    worst = std::max(worst, rep.max_rel);
    checked += rep.checked;
    failed += rep.checked - rep.passed;
  }
  const double secs = seconds_since(t0);
  record(1, worst < 1e-4 && secs < 10.0,
         "20 networks, " + std::to_string(checked) + " coordinates, " + std::to_string(failed) +
             " above tolerance, max rel error " + fmt(worst, 3) + ", " + fmt(secs, 3) + "s");
}

void criterion_2(const fs::path& run) {
  const double acc = read_json(run / "model/train_log.json").at("test_accuracy");
  const double secs = stage_seconds(run, "train");
  record(2, acc >= 0.97 && secs < 300.0, "test accuracy " + fmt(acc) + " in " + fmt(secs, 3) + "s");
}

void criterion_3(const fs::path& run) {
  const json s = read_json(run / "extract/summary.json");
  bool ok = true;
  std::ostringstream bad;
  for (const auto& c : s.at("classes")) {
    const bool good = c.at("met_tau").get<bool>() && c.at("sparsity").get<double>() <= 0.5 &&
                      c.at("auroc_drop").get<double>() <= 0.02;
    if (!good) {
      ok = false;
      bad << ' ' << c.at("name").get<std::string>() << "(sp " << fmt(c.at("sparsity")) << ", drop "
          << fmt(c.at("auroc_drop")) << ")";
    }
  }
  const double secs = stage_seconds(run, "extract");
  record(3, ok && secs < 900.0,
         "mean sparsity " + fmt(s.at("mean_sparsity")) + ", max AUROC drop " + fmt(s.at("max_auroc_drop")) + ", " +
             fmt(secs, 3) + "s" + (ok ? "" : "; failing:" + bad.str()));
}

void criterion_4(const fs::path& run) {
  const DatasetSplits data = load_dataset(run / "data/dataset.ssds");
  const auto [spec, weights] = load_model(run / "model/model.ssnm");
  LabeledSet some(data.test.begin(), data.test.begin() + 40);
  const Tensor x = stack_images(some);
  const std::vector<int> y = labels_of(some);

  std::vector<SubnetworkBundle> ident(data.num_classes);
  for (std::size_t c = 0; c < ident.size(); ++c) {
    ident[c].class_id = static_cast<int>(c);
    ident[c].gates = GateVector::filled(spec, 1.0);
  }

  const Tensor a = forward(spec, weights, x);
  const Tensor b = subnet_forward(spec, weights, ident[0], x);
  const bool fwd = a.storage() == b.storage();

  bool sal = true;
  std::string sal_bad;
  const SaliencyParams params;
  for (SaliencyMethod m : all_saliency_methods()) {
    const auto n = saliency_batch(m, spec, weights, nullptr, x, y, params);
    const auto s = saliency_batch(m, spec, weights, &ident[0].gates, x, y, params);
    for (std::size_t i = 0; i < n.size(); ++i)
      if (n[i].grid.storage() != s[i].grid.storage()) {
        sal = false;
        sal_bad += " " + std::string(to_string(m));
        break;
      }
  }

  // every fifth sample; the split is ordered by class
  LabeledSet train;
  for (std::size_t i = 0; i < data.train.size(); i += 5) train.push_back(data.train[i]);
  const MahalanobisStats full = fit_mahalanobis(spec, weights, nullptr, train);
  const MahalanobisStats sub = fit_mahalanobis(spec, weights, &ident, train);
  bool stats = full.layers.size() == sub.layers.size();
  for (std::size_t l = 0; stats && l < full.layers.size(); ++l)
    stats = full.layers[l].means == sub.layers[l].means && full.layers[l].covariance == sub.layers[l].covariance &&
            full.layers[l].delta == sub.layers[l].delta && full.layers[l].cholesky == sub.layers[l].cholesky;
  const bool scores = mahalanobis_score(full, spec, weights, nullptr, x) == mahalanobis_score(sub, spec, weights, &ident, x);

  record(4, fwd && sal && stats && scores,
         std::string("forward ") + (fwd ? "equal" : "differs") + ", saliency " + (sal ? "equal for 6 methods" : "differs:" + sal_bad) +
             ", mahalanobis stats " + (stats ? "equal" : "differ") + ", scores " + (scores ? "equal" : "differ"));
}

void criterion_5(const fs::path& work, const fs::path& run) {
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    fs::path dir = run;
    if (seed != 1) {
      dir = work / ("signature_seed" + std::to_string(seed));
      fs::create_directories(dir / "data");
      fs::create_directories(dir / "model");
      fs::copy_file(run / "data/dataset.ssds", dir / "data/dataset.ssds", fs::copy_options::overwrite_existing);
      fs::copy_file(run / "model/model.ssnm", dir / "model/model.ssnm", fs::copy_options::overwrite_existing);
      cli::RunConfig c = default_run(dir);
      c.extract.seed = seed;
      cli::run_stage("extract", c);
      cli::run_stage("signatures", c);
    }
    const json sep = read_json(dir / "signatures/signatures.json").at("metrics").at("cosine").at("family_separation");
    const double intra = sep.at("intra"), inter = sep.at("inter");
    if (intra < inter) ++wins;
    detail << " seed " << seed << ": " << fmt(intra, 3) << "/" << fmt(inter, 3) << ";";
  }
  record(5, wins >= 4, std::to_string(wins) + "/5 seeds with intra < inter (intra/inter:" + detail.str() + ")");
}

void criterion_6(const fs::path& run) {
  int wins = 0;
  std::ostringstream detail;
  for (SaliencyMethod m : all_saliency_methods()) {
    const std::string name(to_string(m));
    const double n = read_json(run / "explain" / (name + "_normal.json")).at("error");
    const double s = read_json(run / "explain" / (name + "_subnet.json")).at("error");
    if (s <= n) ++wins;
    detail << ' ' << name << ' ' << fmt(n, 3) << "->" << fmt(s, 3) << ';';
  }
  record(6, wins >= 4, std::to_string(wins) + "/6 methods with subnet error <= normal (" + detail.str() + ")");
}

void criterion_7(const fs::path& run) {
  const DatasetSplits data = load_dataset(run / "data/dataset.ssds");
  const auto [spec, weights] = load_model(run / "model/model.ssnm");
  std::vector<std::size_t> idx(data.test.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(7);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(50);
  int ok = 0;
  double worst = 0.0;
  for (std::size_t i : idx) {
    const Tensor& img = data.test[i].image;
    const int c = data.test[i].label;
    const Tensor attr = intgrad_attribution(spec, weights, nullptr, img, c, 256);
    double sum = 0.0;
    for (double v : attr.storage()) sum += v;
    Shape bs{1};
    for (std::size_t d : img.shape()) bs.push_back(d);
    const Tensor x = img.reshaped(bs);
    const Tensor zero(bs, 0.0);
    const double delta = forward(spec, weights, x)[static_cast<std::size_t>(c)] -
                         forward(spec, weights, zero)[static_cast<std::size_t>(c)];
    const double err = std::abs(sum - delta);
    const double bound = 0.01 * std::abs(delta) + 1e-3;
    if (err <= bound) ++ok;
    worst = std::max(worst, err / bound);
  }
  record(7, ok == 50, std::to_string(ok) + "/50 images within 1%|delta|+1e-3 (worst error/bound " + fmt(worst, 3) + ")");
}

void criterion_8() {
  std::mt19937_64 rng(8);
  // AUROC vs pairwise counting, with ties from a coarse grid
  bool auc_ok = true;
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> n(1, 60), v(0, 12);
    std::vector<double> pos(static_cast<std::size_t>(n(rng))), neg(static_cast<std::size_t>(n(rng)));
    for (double& p : pos) p = v(rng) * 0.25;
    for (double& q : neg) q = v(rng) * 0.25 - 0.5;
    double count = 0.0;
    for (double p : pos)
      for (double q : neg) count += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
    const double oracle = count / static_cast<double>(pos.size() * neg.size());
    if (auroc(pos, neg) != oracle) auc_ok = false;
  }

  // Mahalanobis vs dense solve at the feature widths of the reference network
  double maha_err = 0.0;
  for (std::size_t d : {16u, 32u, 64u, 128u}) {
    const std::size_t k = 10, n = 400;
    std::normal_distribution<double> nd;
    Tensor f({n, d});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(i % k);
      for (std::size_t j = 0; j < d; ++j) f[i * d + j] = nd(rng) + 0.3 * labels[i] * (j % 3 == 0);
    }
    const std::vector<Tensor> feats{f};
    const MahalanobisStats st = fit_gaussian(feats, labels, k);
    const LayerStats& ls = st.layers[0];
    Eigen::MatrixXd s(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) s(i, j) = ls.covariance[i][j] + (i == j ? ls.delta : 0.0);
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(s);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> x(d);
      for (double& v : x) v = nd(rng);
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        Eigen::VectorXd diff(d);
        for (std::size_t j = 0; j < d; ++j) diff(j) = x[j] - ls.means[c][j];
        best = std::max(best, -diff.dot(lu.solve(diff)));
      }
      maha_err = std::max(maha_err, std::abs(mahalanobis_max(ls, x) - best));
    }
  }

  // PCA variances vs full eigensolver on signature-shaped rows
  double pca_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::uniform_real_distribution<double> u(0.0, 1.5);
    Matrix rows(10, std::vector<double>(240));
    for (auto& r : rows)
      for (double& v : r) v = u(rng) < 0.75 ? 0.0 : u(rng);
    const Projection p = project_2d(rows);
    Eigen::MatrixXd x(10, 240);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 240; ++j) x(i, j) = rows[i][j];
    const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centred.transpose() * centred / 9.0;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    pca_err = std::max({pca_err, std::abs(p.variance[0] - es.eigenvalues()(239)),
                        std::abs(p.variance[1] - es.eigenvalues()(238))});
  }

  // Block recovery on separated synthetic distance matrices
  int recovered = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    std::uniform_int_distribution<int> blocks(2, 4), size(2, 4);
    const int b = blocks(rng);
    std::vector<int> truth;
    for (int g = 0; g < b; ++g)
      for (int s = size(rng); s > 0; --s) truth.push_back(g);
    std::shuffle(truth.begin(), truth.end(), rng);
    const std::size_t n = truth.size();
    std::uniform_real_distribution<double> within(0.0, 1.0), across(5.0, 6.0);
    Matrix dist(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) dist[i][j] = dist[j][i] = truth[i] == truth[j] ? within(rng) : across(rng);
    const Clustering cl = agglomerate(dist, static_cast<std::size_t>(b));
    if (adjusted_rand_index(cl.assignment, truth) == 1.0) ++recovered;
  }

  const bool ok = auc_ok && maha_err <= 1e-9 && pca_err <= 1e-6 && recovered == trials;
  record(8, ok,
         std::string("auroc ") + (auc_ok ? "exact" : "mismatch") + ", mahalanobis max abs err " + fmt(maha_err, 3) +
             ", pca max err " + fmt(pca_err, 3) + ", blocks recovered " + std::to_string(recovered) + "/" +
             std::to_string(trials));
}

void criterion_9(const fs::path& run) {
  const json det = read_json(run / "detect/detection.json");
  double full = 0.0, sub = 0.0;
  double fgsm_full = 0.0, fgsm_sub = 0.0;
  bool unknown_ok = true;
  std::ostringstream unk;
  const auto& attacks = det.at("attacks");
  for (const auto& a : attacks) {
    const double f = a.at("auroc").at("full_model"), s = a.at("auroc").at("subnet");
    full += f / static_cast<double>(attacks.size());
    sub += s / static_cast<double>(attacks.size());
    if (a.at("attack") == "fgsm") {
      fgsm_full = f;
      fgsm_sub = s;
    }
    if (a.contains("unknown_attack_auroc")) {
      const double uf = a.at("unknown_attack_auroc").at("full_model"), us = a.at("unknown_attack_auroc").at("subnet");
      unknown_ok = unknown_ok && uf > 0.5 && us > 0.5;
      unk << ' ' << a.at("attack").get<std::string>() << ' ' << fmt(uf) << '/' << fmt(us);
    }
  }
  const bool ok = sub >= full && fgsm_full >= 0.85 && fgsm_sub >= 0.85 && unknown_ok;
  record(9, ok,
         "mean AUROC full " + fmt(full) + " subnet " + fmt(sub) + ", fgsm " + fmt(fgsm_full) + "/" + fmt(fgsm_sub) +
             ", unseen (full/subnet):" + unk.str());
}

void criterion_10(const fs::path& a, const fs::path& b) {
  const json ma = read_json(a / "manifest.json").at("stages");
  const json mb = read_json(b / "manifest.json").at("stages");
  std::size_t compared = 0, differ = 0;
  std::string first;
  for (const auto& [stage, entry] : ma.items())
    for (const auto& [file, hash] : entry.at("artifacts").items()) {
      ++compared;
      const bool same = mb.contains(stage) && mb.at(stage).at("artifacts").contains(file) &&
                        mb.at(stage).at("artifacts").at(file) == hash &&
                        cli::sha256_file(a / file) == cli::sha256_file(b / file);
      if (!same) {
        ++differ;
        if (first.empty()) first = file;
      }
    }
  record(10, differ == 0 && compared > 0,
         std::to_string(compared) + " artifacts compared, " + std::to_string(differ) + " differ" +
             (first.empty() ? "" : " (first: " + first + ")"));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "subnetscope_acceptance";
  std::set<int> only;
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else if (arg == "--reuse") {
      reuse = true;
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--only 1,2,...] [--reuse]\n";
      return 2;
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id); };
  spdlog::set_level(spdlog::level::warn);

  const fs::path run1 = work / "run1", run2 = work / "run2";
  auto guarded = [&](int id, const std::function<void()>& fn) {
    if (!want(id)) return;
    try {
      fn();
    } catch (const std::exception& e) {
      record(id, false, std::string("error: ") + e.what());
    }
  };

  guarded(1, criterion_1);
  guarded(8, criterion_8);

  const std::set<int> needs_run{2, 3, 4, 5, 6, 7, 9, 10};
  bool need_run = false;
  for (int id : needs_run) need_run = need_run || want(id);
  bool run_ok = true;
  if (need_run) {
    const cli::RunConfig c = default_run(run1);
    auto stage = [&](const char* name) {
      if (!reuse) cli::run_stage(name, c);
    };
    if (!reuse) {
      fs::remove_all(run1);
      std::cout << "running default pipeline in " << run1 << std::endl;
    }
    try {
      stage("train");
      guarded(2, [&] { criterion_2(run1); });
      stage("extract");
      guarded(3, [&] { criterion_3(run1); });
      guarded(4, [&] { criterion_4(run1); });
      stage("signatures");
      guarded(5, [&] { criterion_5(work, run1); });
      stage("explain");
      guarded(6, [&] { criterion_6(run1); });
      guarded(7, [&] { criterion_7(run1); });
      stage("attack");
      stage("detect");
      guarded(9, [&] { criterion_9(run1); });
      stage("report");
    } catch (const std::exception& e) {
      run_ok = false;
      std::cout << "pipeline failed: " << e.what() << std::endl;
    }
    if (want(10) && run_ok) {
      fs::remove_all(run2);
      std::cout << "rerunning default pipeline in " << run2 << std::endl;
      guarded(10, [&] {
        cli::run_pipeline(default_run(run2));
        criterion_10(run1, run2);
      });
    }
  }

  std::cout << "\nsummary\n";
  int failed = 0;
  for (int id = 1; id <= 10; ++id) {
    if (!want(id)) continue;
    const auto it = results.find(id);
    if (it == results.end()) {
      std::cout << "[FAIL] criterion " << id << ": not run (pipeline failed earlier)\n";
      ++failed;
      continue;
    }
    std::cout << (it->second.pass ? "[PASS] " : "[FAIL] ") << "criterion " << id << ": " << it->second.detail << '\n';
    failed += it->second.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}

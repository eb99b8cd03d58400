#include "pipeline.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "subnetscope/error.hpp"

#ifndef SUBNETSCOPE_VERSION
#define SUBNETSCOPE_VERSION "0.0.0"
#endif

namespace subnetscope::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Artifact locations, relative to the output directory.
const fs::path kDataset = "data/dataset.ssds";
const fs::path kModel = "model/model.ssnm";
const fs::path kTrainLog = "model/train_log.json";
const fs::path kExtractSummary = "extract/summary.json";
const fs::path kSignatures = "signatures/signatures.json";
const fs::path kTable1 = "explain/table1.csv";
const fs::path kAdversarial = "attack/adversarial.ssad";
const fs::path kAttackSummary = "attack/summary.json";
const fs::path kDetection = "detect/detection.json";

fs::path bundle_path(int c) {
  std::ostringstream os;
  os << "bundles/class_" << std::setw(2) << std::setfill('0') << c << ".json";
  return os.str();
}

fs::path loc_path(SaliencyMethod m, bool subnet) {
  return fs::path("explain") / (std::string(to_string(m)) + (subnet ? "_subnet.json" : "_normal.json"));
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

// Collects the files one stage writes so the manifest can hash them.
class StageOutput {
 public:
  explicit StageOutput(fs::path root) : root_(std::move(root)) {}

  fs::path claim(const fs::path& rel) {
    const fs::path full = root_ / rel;
    fs::create_directories(full.parent_path());
    std::lock_guard lock(mu_);
    files_.push_back(rel);
    return full;
  }

  void text(const fs::path& rel, const std::string& content) {
    const fs::path full = claim(rel);
    std::ofstream out(full, std::ios::binary);
    out << content;
    if (!out) throw Error("cannot write " + full.string());
  }

  std::vector<fs::path> files() const {
    auto f = files_;
    std::sort(f.begin(), f.end());
    return f;
  }

 private:
  fs::path root_;
  std::mutex mu_;
  std::vector<fs::path> files_;
};

fs::path require(const RunConfig& c, const fs::path& rel) {
  const fs::path full = fs::path(c.output) / rel;
  if (!fs::exists(full)) throw MissingArtifactError(full);
  return full;
}

json read_json(const RunConfig& c, const fs::path& rel) {
  const fs::path full = require(c, rel);
  try {
    return json::parse(read_file(full));
  } catch (const json::exception& e) {
    throw FormatError(full.string() + ": " + e.what());
  }
}

DatasetSplits build_dataset(const DatasetSection& d) {
  if (d.source == "shapes") return generate_shapes(d.shapes);
  DatasetSplits out;
  LabeledSet train = load_idx(d.idx.train_images, d.idx.train_labels);
  out.test = load_idx(d.idx.test_images, d.idx.test_labels);
  const auto n_val = static_cast<std::size_t>(static_cast<double>(train.size()) * d.idx.val_fraction);
  if (n_val == 0 || n_val >= train.size()) throw DataError("idx: training file too small to hold out a validation split");
  out.val.assign(train.end() - static_cast<long>(n_val), train.end());
  train.resize(train.size() - n_val);
  out.train = std::move(train);
  int max_label = 0;
  for (const auto* set : {&out.train, &out.val, &out.test})
    for (const auto& s : *set) max_label = std::max(max_label, s.label);
  out.num_classes = static_cast<std::size_t>(max_label) + 1;
  for (std::size_t k = 0; k < out.num_classes; ++k) out.class_names.push_back(std::to_string(k));
  const Shape& s = out.train.front().image.shape();
  out.channels = s[0];
  out.height = s[1];
  out.width = s[2];
  return out;
}

struct Loaded {
  DatasetSplits data;
  ModelSpec spec;
  Weights weights;
};

Loaded load_data_and_model(const RunConfig& c) {
  const fs::path mpath = require(c, kModel);
  const fs::path dpath = require(c, kDataset);
  Loaded l;
  l.data = load_dataset(dpath);
  std::tie(l.spec, l.weights) = load_model(mpath);
  if (l.spec.in_channels != l.data.channels || l.spec.in_height != l.data.height ||
      l.spec.in_width != l.data.width || l.spec.num_classes != l.data.num_classes)
    throw DataError("model " + mpath.string() + " does not match dataset " + dpath.string() + "; rerun train");
  return l;
}

std::vector<SubnetworkBundle> load_bundles(const RunConfig& c, std::size_t k) {
  std::vector<SubnetworkBundle> out;
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back(load_bundle(require(c, bundle_path(static_cast<int>(i)))));
    if (out.back().class_id != static_cast<int>(i)) throw DataError(bundle_path(static_cast<int>(i)).string() + ": wrong class id");
  }
  return out;
}

// First n samples of every class, in set order; n = 0 keeps everything.
LabeledSet per_class_subset(const LabeledSet& set, std::size_t n) {
  if (n == 0) return set;
  std::map<int, std::size_t> taken;
  LabeledSet out;
  for (const auto& s : set)
    if (taken[s.label]++ < n) out.push_back(s);
  return out;
}

double class_auroc(const Tensor& logits, std::span<const int> labels, int c) {
  const std::size_t k = logits.shape()[1];
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == c ? pos : neg).push_back(logits[i * k + static_cast<std::size_t>(c)]);
  return auroc(pos, neg);
}

// ---------------------------------------------------------------------------
// Stages

void stage_train(const RunConfig& c, StageOutput& out) {
  const DatasetSplits data = build_dataset(c.dataset);
  spdlog::info("dataset: {} train / {} val / {} test, {} classes", data.train.size(), data.val.size(),
               data.test.size(), data.num_classes);
  save_dataset(out.claim(kDataset), data, to_json(c).at("dataset").dump());

  const ModelSpec spec = build_reference_cnn(data.channels, data.height, data.width, data.num_classes);
  const TrainResult r = train_base(spec, data.train, data.val, c.train);
  const auto [test_loss, test_acc] = evaluate(spec, r.weights, data.test);
  spdlog::info("train: test accuracy {:.4f}", test_acc);
  save_model(out.claim(kModel), spec, r.weights);

  json epochs = json::array();
  for (const auto& e : r.log.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}});
  out.text(kTrainLog, pretty({{"initial_loss", r.log.initial_loss},
                              {"epochs", epochs},
                              {"test_loss", test_loss},
                              {"test_accuracy", test_acc},
                              {"gated_channels", spec.gated_channel_count()}}));
}

void stage_extract(const RunConfig& c, StageOutput& out) {
  const Loaded l = load_data_and_model(c);
  const std::size_t k = l.data.num_classes;
  const Tensor teacher_train = forward(l.spec, l.weights, stack_images(l.data.train));
  const Tensor teacher_val = forward(l.spec, l.weights, stack_images(l.data.val));
  const Tensor test_x = stack_images(l.data.test);
  const std::vector<int> test_y = labels_of(l.data.test);
  const Tensor full_logits = forward(l.spec, l.weights, test_x);

  std::vector<SubnetworkBundle> bundles(k);
  std::vector<double> sub_auroc(k);
  parallel_for(k, c.workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    bundles[i] = extract_subnetwork(l.spec, l.weights, l.data.train, l.data.val, static_cast<int>(i), c.extract,
                                    &teacher_train, &teacher_val);
    sub_auroc[i] = class_auroc(subnet_forward(l.spec, l.weights, bundles[i], test_x), test_y, static_cast<int>(i));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("extract: class {} sparsity {:.3f} met_tau {} ({:.1f}s)", l.data.class_names[i],
                 bundles[i].sparsity, bundles[i].met_tau, secs);
  });

  json classes = json::array();
  bool all_met = true;
  double mean_sp = 0.0, max_drop = -1.0;
  for (std::size_t i = 0; i < k; ++i) {
    save_bundle(out.claim(bundle_path(static_cast<int>(i))), bundles[i]);
    const double full = class_auroc(full_logits, test_y, static_cast<int>(i));
    const double drop = full - sub_auroc[i];
    all_met = all_met && bundles[i].met_tau;
    mean_sp += bundles[i].sparsity / static_cast<double>(k);
    max_drop = std::max(max_drop, drop);
    classes.push_back({{"class", i},
                       {"name", l.data.class_names[i]},
                       {"sparsity", bundles[i].sparsity},
                       {"met_tau", bundles[i].met_tau},
                       {"selected_epoch", bundles[i].selected_epoch},
                       {"auroc_full", full},
                       {"auroc_subnet", sub_auroc[i]},
                       {"auroc_drop", drop}});
  }
  out.text(kExtractSummary, pretty({{"classes", classes},
                                    {"all_met_tau", all_met},
                                    {"mean_sparsity", mean_sp},
                                    {"max_auroc_drop", max_drop},
                                    {"tau", c.extract.tau}}));
}

void stage_signatures(const RunConfig& c, StageOutput& out) {
  const DatasetSplits data = load_dataset(require(c, kDataset));
  const auto bundles = load_bundles(c, data.num_classes);
  const SignatureMatrix sig = build_signatures(bundles, data.num_classes, data.families, data.class_names);

  json metrics = json::object();
  for (Metric m : c.signatures.metrics) {
    const std::string name(to_string(m));
    const Matrix dist = pairwise_distance(sig, m);
    out.text(fs::path("signatures") / ("distance_" + name + ".csv"), distance_csv(dist, sig.names));
    const Clustering cl = agglomerate(dist, c.signatures.n_clusters);
    json entry{{"clustering", clustering_json(cl, sig)}};
    if (!data.families.empty()) {
      const FamilySeparation fs = family_separation(dist, data.families);
      entry["family_separation"] = {{"intra", fs.intra}, {"inter", fs.inter}, {"intra_below_inter", fs.intra < fs.inter}};
      entry["ari_vs_families"] = adjusted_rand_index(cl.assignment, data.families);
      entry["contingency"] = contingency_table(cl.assignment, data.families);
    }
    metrics[name] = std::move(entry);
  }
  const Projection proj = project_2d(sig.rows);
  out.text("signatures/scatter.svg", scatter_svg(proj, sig));
  out.text(kSignatures, pretty({{"classes", sig.names},
                                {"families", sig.families},
                                {"metrics", metrics},
                                {"projection", {{"coords", proj.coords}, {"variance", proj.variance}}}}));
}

std::string file_safe(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
  return s;
}

void stage_explain(const RunConfig& c, StageOutput& out) {
  const Loaded l = load_data_and_model(c);
  const auto bundles = load_bundles(c, l.data.num_classes);
  const LabeledSet heldout = per_class_subset(l.data.val, c.explain.heldout_per_class);
  const LabeledSet test = per_class_subset(l.data.test, c.explain.test_per_class);
  const LabeledSet examples = per_class_subset(l.data.test, c.explain.maps_per_class);

  const auto& methods = c.explain.methods;
  const std::size_t jobs = methods.size() * 2;
  std::vector<LocResult> results(jobs);
  parallel_for(jobs, c.workers, [&](std::size_t j) {
    const SaliencyMethod m = methods[j / 2];
    const bool subnet = j % 2 == 1;
    const auto t0 = std::chrono::steady_clock::now();
    results[j] = wsol_eval(m, l.spec, l.weights, subnet ? &bundles : nullptr, heldout, test, c.explain.wsol);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("explain: {} {} alpha* {} error {:.4f} ({:.1f}s)", to_string(m), subnet ? "subnet" : "normal",
                 results[j].alpha_star, results[j].error_at_alpha_star, secs);

    std::map<int, int> seen;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& s = examples[i];
      const GateVector* gates = subnet ? &bundles[static_cast<std::size_t>(s.label)].gates : nullptr;
      const SaliencyMap map = saliency(m, l.spec, l.weights, gates, s.image, s.label, c.explain.wsol.saliency, i);
      std::ostringstream name;
      name << to_string(m) << '_' << (subnet ? "subnet" : "normal") << '_'
           << file_safe(l.data.class_names[static_cast<std::size_t>(s.label)]) << '_' << seen[s.label]++ << ".pgm";
      out.text(fs::path("explain/maps") / name.str(), map_to_pgm(map.grid));
    }
  });

  for (std::size_t j = 0; j < jobs; ++j) out.text(loc_path(results[j].method, results[j].subnet), pretty(loc_result_json(results[j])));
  out.text(kTable1, table1_csv(results));
}

void stage_attack(const RunConfig& c, StageOutput& out) {
  const Loaded l = load_data_and_model(c);
  const CandidatePool pool = candidate_pool(l.spec, l.weights, l.data.test, c.detect);
  spdlog::info("attack: {} correctly classified candidates", pool.size());
  std::vector<AdversarialSet> sets(c.detect.attacks.size());
  parallel_for(sets.size(), c.workers, [&](std::size_t i) {
    sets[i] = craft_adversarial(c.detect.attacks[i], l.spec, l.weights, pool, c.detect.min_successful);
    spdlog::info("attack: {} {} of {} succeeded", to_string(sets[i].kind), sets[i].sample_ids.size(), pool.size());
  });
  save_adversarial(out.claim(kAdversarial), sets);

  json attacks = json::array();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& a = c.detect.attacks[i];
    double linf = 0.0;
    for (std::size_t j = 0; j < sets[i].clean.numel(); ++j)
      linf = std::max(linf, std::abs(sets[i].adversarial[j] - sets[i].clean[j]));
    attacks.push_back({{"attack", to_string(a.kind)},
                       {"epsilon", a.epsilon},
                       {"steps", a.steps},
                       {"overshoot", a.overshoot},
                       {"attempted", pool.size()},
                       {"successful", sets[i].sample_ids.size()},
                       {"success_rate", static_cast<double>(sets[i].sample_ids.size()) / static_cast<double>(pool.size())},
                       {"max_linf", linf}});
  }
  out.text(kAttackSummary, pretty({{"candidates", pool.size()}, {"attacks", attacks}}));
}

void stage_detect(const RunConfig& c, StageOutput& out) {
  const Loaded l = load_data_and_model(c);
  const auto bundles = load_bundles(c, l.data.num_classes);
  const std::vector<AdversarialSet> sets = load_adversarial(require(c, kAdversarial));
  bool same = sets.size() == c.detect.attacks.size();
  for (std::size_t i = 0; same && i < sets.size(); ++i) same = sets[i].kind == c.detect.attacks[i].kind;
  if (!same) throw DataError(kAdversarial.string() + " does not match detect.attacks; rerun attack");
  const CandidatePool pool = candidate_pool(l.spec, l.weights, l.data.test, c.detect);
  const DetectionReport r = evaluate_detection(l.spec, l.weights, bundles, l.data.train, pool, sets, c.detect);
  for (const auto& a : r.attacks)
    spdlog::info("detect: {} auroc full {:.4f} subnet {:.4f}", to_string(a.kind), a.auroc_full, a.auroc_subnet);
  out.text(kDetection, pretty(detection_report_json(r)));
  out.text("detect/table2.csv", table2_csv(r, c.dataset.source));
}

void stage_report(const RunConfig& c, StageOutput& out) {
  const json train = read_json(c, kTrainLog);
  const json extract = read_json(c, kExtractSummary);
  const json sig = read_json(c, kSignatures);
  const json det = read_json(c, kDetection);

  std::ostringstream t1;
  t1 << std::setprecision(10);
  t1 << "method,normal_alpha_star,normal_error,subnet_alpha_star,subnet_error\n";
  std::size_t not_worse = 0;
  json explain = json::array();
  for (SaliencyMethod m : c.explain.methods) {
    const json n = read_json(c, loc_path(m, false));
    const json s = read_json(c, loc_path(m, true));
    const double ne = n.at("error"), se = s.at("error");
    t1 << to_string(m) << ',' << n.at("alpha_star").get<double>() << ',' << ne << ','
       << s.at("alpha_star").get<double>() << ',' << se << '\n';
    if (se <= ne) ++not_worse;
    explain.push_back({{"method", to_string(m)}, {"normal_error", ne}, {"subnet_error", se}});
  }
  out.text("report/table1.csv", t1.str());

  std::ostringstream t2;
  t2 << std::setprecision(10);
  t2 << "dataset,block,attack,mahalanobis,subnet_mahalanobis\n";
  double mean_full = 0.0, mean_sub = 0.0;
  const auto& attacks = det.at("attacks");
  for (const auto& a : attacks) {
    const double f = a.at("auroc").at("full_model"), s = a.at("auroc").at("subnet");
    t2 << c.dataset.source << ",seen," << a.at("attack").get<std::string>() << ',' << f << ',' << s << '\n';
    mean_full += f / static_cast<double>(attacks.size());
    mean_sub += s / static_cast<double>(attacks.size());
  }
  for (const auto& a : attacks)
    if (a.contains("unknown_attack_auroc"))
      t2 << c.dataset.source << ",unseen," << a.at("attack").get<std::string>() << ','
         << a.at("unknown_attack_auroc").at("full_model").get<double>() << ','
         << a.at("unknown_attack_auroc").at("subnet").get<double>() << '\n';
  out.text("report/table2.csv", t2.str());

  json summary{{"test_accuracy", train.at("test_accuracy")},
               {"extraction",
                {{"all_met_tau", extract.at("all_met_tau")},
                 {"mean_sparsity", extract.at("mean_sparsity")},
                 {"max_auroc_drop", extract.at("max_auroc_drop")}}},
               {"explain", {{"methods", explain}, {"subnet_not_worse", not_worse}}},
               {"detection", {{"mean_auroc_full", mean_full}, {"mean_auroc_subnet", mean_sub}}}};
  if (sig.at("metrics").contains("cosine") && sig.at("metrics").at("cosine").contains("family_separation"))
    summary["signatures"] = sig.at("metrics").at("cosine").at("family_separation");
  out.text("report/summary.json", pretty(summary));
}

using StageFn = void (*)(const RunConfig&, StageOutput&);

const std::map<std::string, StageFn>& stage_table() {
  static const std::map<std::string, StageFn> t{{"train", stage_train},     {"extract", stage_extract},
                                                {"signatures", stage_signatures}, {"explain", stage_explain},
                                                {"attack", stage_attack},   {"detect", stage_detect},
                                                {"report", stage_report}};
  return t;
}

void update_manifest(const RunConfig& c, const std::string& stage, double seconds, const std::vector<fs::path>& files) {
  const fs::path path = fs::path(c.output) / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    m = json::parse(read_file(path), nullptr, false);
    if (m.is_discarded() || !m.is_object()) m = json::object();
  }
  json artifacts = json::object();
  for (const auto& f : files) artifacts[f.generic_string()] = sha256_file(fs::path(c.output) / f);
  m["tool"] = "subnetscope";
  m["version"] = version();
  m["config"] = to_json(c);
  m["stages"][stage] = {{"seconds", seconds}, {"artifacts", artifacts}};
  std::ofstream out(path, std::ios::binary);
  out << pretty(m);
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"train", "extract", "signatures", "explain", "attack", "detect", "report"};
  return names;
}

void run_stage(const std::string& name, const RunConfig& config) {
  const auto it = stage_table().find(name);
  if (it == stage_table().end()) throw ConfigError("unknown stage '" + name + "'");
  spdlog::info("{}: start (output {})", name, config.output);
  fs::create_directories(config.output);
  const auto t0 = std::chrono::steady_clock::now();
  StageOutput out(config.output);
  it->second(config, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  update_manifest(config, name, secs, out.files());
  spdlog::info("{}: done in {:.1f}s", name, secs);
}

void run_pipeline(const RunConfig& config) {
  for (const auto& s : stage_names()) run_stage(s, config);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string sha256_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed for " + path.string());
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return 2;
  return 3;
}

std::string version() { return SUBNETSCOPE_VERSION; }

}  // namespace subnetscope::cli

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subnetscope/data.hpp"
#include "subnetscope/extract.hpp"
#include "subnetscope/model.hpp"

namespace subnetscope {

// ---------------------------------------------------------------------------
// Attacks

enum class AttackKind { fgsm, bim, deepfool };
std::string_view to_string(AttackKind k);
AttackKind attack_kind_from_string(std::string_view name);

struct AttackSpec {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.1;    // L-infinity budget (fgsm, bim)
  std::size_t steps = 1;   // bim iterations / deepfool iteration cap
  double overshoot = 0.02; // deepfool
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  static AttackSpec defaults(AttackKind kind);
  void validate() const;
};

struct AttackResult {
  Tensor x_adv;                 // same shape as the input batch
  std::vector<int> clean_pred;
  std::vector<int> adv_pred;
  std::vector<bool> success;    // adversarial prediction differs from the clean one
};

/// Crafts adversarial versions of x (N x C x H x W) against labels y.
AttackResult attack(const AttackSpec& spec, const ModelSpec& model, const Weights& weights, const Tensor& x,
                    std::span<const int> y);

// ---------------------------------------------------------------------------
// Class-conditional Gaussian scoring

enum class DetectorMode { full_model, subnet };
std::string_view to_string(DetectorMode m);

struct LayerStats {
  std::vector<std::vector<double>> means;  // K x d
  std::vector<std::vector<double>> covariance;  // d x d, before regularization
  double delta = 0.0;
  std::vector<std::vector<double>> cholesky;  // lower factor of covariance + delta I
};

struct MahalanobisStats {
  DetectorMode mode = DetectorMode::full_model;
  std::vector<LayerStats> layers;
  std::vector<std::size_t> class_counts;
  std::size_t total = 0;
};

/// Spatially averaged block outputs (one N x d matrix per scored layer).
std::vector<Tensor> layer_features(const ModelSpec& spec, const Weights& weights, const GateVector* gates,
                                   const Tensor& x, std::size_t batch = 100);

/// Means and pooled covariance from labelled per-layer features.
MahalanobisStats fit_gaussian(std::span<const Tensor> features, std::span<const int> labels, std::size_t num_classes);

/// Features of sample i come from bundle y_i in subnet mode (`bundles` non-null).
MahalanobisStats fit_mahalanobis(const ModelSpec& spec, const Weights& weights,
                                 const std::vector<SubnetworkBundle>* bundles, const LabeledSet& train,
                                 std::size_t batch = 100);

/// max_c -(f - mu_c)^T (Sigma + delta I)^{-1} (f - mu_c) with the same f for every c.
double mahalanobis_max(const LayerStats& stats, std::span<const double> f);
/// Same with a separate feature vector per class term.
double mahalanobis_max(const LayerStats& stats, const std::vector<std::vector<double>>& per_class_f);

/// N x L per-layer scores. In subnet mode every class term uses the features
/// from the bundle of the full model's predicted class; with
/// `per_class_features` class c's term uses bundle c instead.
std::vector<std::vector<double>> mahalanobis_score(const MahalanobisStats& stats, const ModelSpec& spec,
                                                   const Weights& weights, const std::vector<SubnetworkBundle>* bundles,
                                                   const Tensor& x, bool per_class_features = false,
                                                   std::size_t batch = 100);

// ---------------------------------------------------------------------------
// Detector

struct DetectorConfig {
  double lr = 0.1;
  std::size_t iterations = 2000;
  double l2 = 1e-4;
};

struct LogisticDetector {
  std::vector<double> mean;
  std::vector<double> stdev;
  std::vector<double> weights;
  double bias = 0.0;

  double predict(std::span<const double> features) const;
  std::vector<double> predict(const std::vector<std::vector<double>>& rows) const;
};

/// labels: 1 adversarial, 0 clean.
LogisticDetector train_detector(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                                const DetectorConfig& config = {});

/// P(positive outranks negative), ties count one half.
double auroc(std::span<const double> positive, std::span<const double> negative);

// ---------------------------------------------------------------------------
// Suite

struct DetectionConfig {
  std::vector<AttackSpec> attacks{AttackSpec::defaults(AttackKind::fgsm), AttackSpec::defaults(AttackKind::bim),
                                  AttackSpec::defaults(AttackKind::deepfool)};
  std::size_t max_samples = 500;
  std::size_t min_successful = 50;
  bool per_class_features = false;  // every class term uses the predicted class bundle
  std::uint64_t seed = 1;
  DetectorConfig detector;
};

struct AttackRecord {
  AttackKind kind = AttackKind::fgsm;
  std::size_t attempted = 0;
  std::size_t successful = 0;
  double auroc_full = 0.0;
  double auroc_subnet = 0.0;
  // Detector trained on the first attack (fgsm), evaluated on this one.
  std::optional<double> unknown_full;
  std::optional<double> unknown_subnet;
  std::size_t detector_train = 0;
  std::size_t detector_test = 0;
};

struct DetectionReport {
  std::vector<AttackRecord> attacks;
  std::size_t clean_candidates = 0;
  DetectionConfig config;
};

struct AdversarialSet {
  AttackKind kind = AttackKind::fgsm;
  std::vector<std::size_t> sample_ids;  // indices into the candidate clean set
  Tensor clean;
  Tensor adversarial;
};

/// Correctly classified test images the attacks start from.
struct CandidatePool {
  Tensor clean;
  std::vector<int> labels;
  std::vector<std::size_t> test_ids;
  std::size_t size() const { return labels.size(); }
};

/// Deterministic subset (config.max_samples, config.seed) of the test set that
/// the full model classifies correctly.
CandidatePool candidate_pool(const ModelSpec& spec, const Weights& weights, const LabeledSet& test,
                             const DetectionConfig& config);

/// Runs one attack over the pool and keeps the successful samples. Throws when
/// fewer than `min_successful` succeed.
AdversarialSet craft_adversarial(const AttackSpec& attack, const ModelSpec& spec, const Weights& weights,
                                 const CandidatePool& pool, std::size_t min_successful);

/// Scores clean and adversarial samples in both modes, splits pairs 50/50 by
/// sample id and fits one detector per attack and mode. The first set's
/// detectors are also evaluated on the later sets.
DetectionReport evaluate_detection(const ModelSpec& spec, const Weights& weights,
                                   const std::vector<SubnetworkBundle>& bundles, const LabeledSet& train,
                                   const CandidatePool& pool, const std::vector<AdversarialSet>& sets,
                                   const DetectionConfig& config);

/// Full protocol: craft, score in both modes, split pairs 50/50 (by sample id,
/// consistent across attacks), fit and evaluate the detector.
/// `adv_out`, when given, receives the successful adversarial sets.
DetectionReport run_detection_suite(const ModelSpec& spec, const Weights& weights,
                                    const std::vector<SubnetworkBundle>& bundles, const LabeledSet& train,
                                    const LabeledSet& test, const DetectionConfig& config,
                                    std::vector<AdversarialSet>* adv_out = nullptr);

nlohmann::json detection_report_json(const DetectionReport& r);
/// dataset, method, attack, block, auroc
std::string table2_csv(const DetectionReport& r, const std::string& dataset);

/// Cache file: magic "SSAD", JSON header, f32 clean then adversarial images.
void save_adversarial(const std::filesystem::path& path, const std::vector<AdversarialSet>& sets);
std::vector<AdversarialSet> load_adversarial(const std::filesystem::path& path);

}  // namespace subnetscope

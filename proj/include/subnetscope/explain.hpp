#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subnetscope/data.hpp"
#include "subnetscope/extract.hpp"
#include "subnetscope/model.hpp"

namespace subnetscope {

enum class SaliencyMethod { gradient, deconv, guided_bp, gradcam, intgrad, smoothgrad };

std::string_view to_string(SaliencyMethod m);
SaliencyMethod saliency_method_from_string(std::string_view name);
const std::vector<SaliencyMethod>& all_saliency_methods();

struct SaliencyParams {
  std::size_t intgrad_steps = 32;
  std::size_t smoothgrad_samples = 25;
  double smoothgrad_sigma = 0.15;  // noise std as a fraction of the image's value range
  std::uint64_t seed = 1;

  void validate() const;
};

struct SaliencyMap {
  Tensor grid;  // H x W, nonnegative
  SaliencyMethod method = SaliencyMethod::gradient;
  int class_id = 0;
  bool subnet = false;
};

/// Maps for a batch x (N x C x H x W), image i explained for classes[i].
/// With `gates` every forward and backward pass runs through the gated network.
/// `noise_keys` seeds each image's smoothgrad noise (defaults to the batch
/// index), so a map does not depend on which batch the image sits in.
std::vector<SaliencyMap> saliency_batch(SaliencyMethod method, const ModelSpec& spec, const Weights& weights,
                                        const GateVector* gates, const Tensor& x, std::span<const int> classes,
                                        const SaliencyParams& params, std::span<const std::uint64_t> noise_keys = {});

/// Single image (C x H x W).
SaliencyMap saliency(SaliencyMethod method, const ModelSpec& spec, const Weights& weights, const GateVector* gates,
                     const Tensor& image, int class_id, const SaliencyParams& params = {}, std::uint64_t noise_key = 0);

/// Signed integrated-gradients attribution (C x H x W) against the zero baseline.
Tensor intgrad_attribution(const ModelSpec& spec, const Weights& weights, const GateVector* gates, const Tensor& image,
                           int class_id, std::size_t steps);

/// Pixels with value >= alpha * mean(grid).
std::vector<std::uint8_t> threshold_mask(const Tensor& grid, double alpha);
/// Tight box of the largest 4-connected component of the thresholded map;
/// the full image when nothing survives the threshold.
BBox saliency_to_bbox(const Tensor& grid, double alpha);
double iou(const BBox& a, const BBox& b);

std::vector<double> default_alpha_grid();

struct LocResult {
  SaliencyMethod method = SaliencyMethod::gradient;
  bool subnet = false;
  std::vector<double> alphas;
  std::vector<double> heldout_error;
  std::vector<double> test_error;
  double alpha_star = 0.0;
  double error_at_alpha_star = 0.0;  // on the test split
  std::size_t heldout_count = 0;
  std::size_t test_count = 0;
};

struct WsolConfig {
  std::vector<double> alphas = default_alpha_grid();
  double iou_threshold = 0.5;
  std::size_t batch_size = 50;
  SaliencyParams saliency;
};

/// Localization error sweep. The class to explain and the correctness of the
/// prediction both come from the full model; with `bundles` (one per class)
/// the saliency of an image predicted as c is computed through bundle c.
LocResult wsol_eval(SaliencyMethod method, const ModelSpec& spec, const Weights& weights,
                    const std::vector<SubnetworkBundle>* bundles, const LabeledSet& heldout, const LabeledSet& test,
                    const WsolConfig& config);

/// Per-image localization outcome for one alpha; exposed for tests.
std::vector<bool> localization_hits(std::span<const Tensor> maps, std::span<const BBox> truth,
                                    const std::vector<bool>& correct, double alpha, double iou_threshold);

nlohmann::json loc_result_json(const LocResult& r);
/// Rows: method, mode, alpha_star, error.
std::string table1_csv(std::span<const LocResult> results);

/// Plain-text P2 greymap scaled so the maximum is 255.
std::string map_to_pgm(const Tensor& grid);
std::string map_to_csv(const Tensor& grid);

}  // namespace subnetscope

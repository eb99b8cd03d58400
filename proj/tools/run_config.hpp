#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "subnetscope/advdetect.hpp"
#include "subnetscope/data.hpp"
#include "subnetscope/explain.hpp"
#include "subnetscope/extract.hpp"
#include "subnetscope/model.hpp"
#include "subnetscope/signature.hpp"

namespace subnetscope::cli {

struct IdxPaths {
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  double val_fraction = 0.1;  // tail of the training file held out for validation
};

struct DatasetSection {
  std::string source = "shapes";  // "shapes" or "idx"
  ShapesConfig shapes;
  IdxPaths idx;
};

struct SignatureSection {
  std::vector<Metric> metrics{Metric::cosine, Metric::euclidean};
  std::size_t n_clusters = 3;
};

struct ExplainSection {
  std::vector<SaliencyMethod> methods = all_saliency_methods();
  WsolConfig wsol;
  std::size_t heldout_per_class = 0;  // 0 keeps the whole validation split
  std::size_t test_per_class = 0;     // 0 keeps the whole test split
  std::size_t maps_per_class = 1;     // example heatmaps written per method and mode
};

struct RunConfig {
  DatasetSection dataset;
  TrainConfig train;
  ExtractionConfig extract;
  SignatureSection signatures;
  ExplainSection explain;
  DetectionConfig detect;
  std::string output = "run";
  std::size_t workers = 1;
};

nlohmann::json to_json(const RunConfig& config);

/// Missing keys keep their defaults; unknown keys, wrong types and invalid
/// values throw ConfigError naming the dotted key.
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" to a full config document. The value is read as JSON
/// when it parses, otherwise as a string. The key must already exist.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Sets the seed of every stage.
void set_all_seeds(RunConfig& config, std::uint64_t seed);

}  // namespace subnetscope::cli

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "subnetscope/tensor.hpp"

namespace subnetscope {

/// Inclusive pixel box.
struct BBox {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;

  long area() const { return static_cast<long>(row1 - row0 + 1) * (col1 - col0 + 1); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct LabeledImage {
  Tensor image;                     // C x H x W in [0, 1]
  int label = 0;
  std::vector<std::uint8_t> mask;   // H x W, empty when the source has no masks
  BBox bbox;

  bool has_mask() const { return !mask.empty(); }
};

using LabeledSet = std::vector<LabeledImage>;

/// Semantic family of a procedural class. Classes in one family share a
/// geometry generator and differ only in its parameters.
enum class Family { polygon, round, stroke };

enum class Generator { regular_polygon, ellipse, stroke };

enum class StrokeKind { none, horizontal_bar, vertical_bar, cross, ring };

struct ShapeClass {
  std::string name;
  Family family;
  Generator generator;
  int sides = 0;               // regular_polygon
  double aspect_lo = 1.0;      // ellipse minor/major ratio range
  double aspect_hi = 1.0;
  StrokeKind stroke = StrokeKind::none;
};

std::string_view to_string(Family f);

/// The fixed ten-class catalogue: triangle, square, pentagon, hexagon,
/// circle, ellipse, horizontal bar, vertical bar, cross, ring.
const std::vector<ShapeClass>& shape_classes();

struct ShapesConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t train_per_class = 500;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 100;
  double noise = 0.05;
  std::uint64_t seed = 1;

  std::size_t num_classes() const { return shape_classes().size(); }
  void validate() const;
};

struct DatasetSplits {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<int> families;  // family id per class; empty when unknown
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Deterministic given config.seed; each sample draws from its own stream so
/// splits are independent of generation order.
DatasetSplits generate_shapes(const ShapesConfig& config);

/// Rasterises one sample of class `label` into `out` (exposed for tests).
LabeledImage render_shape(const ShapesConfig& config, int label, std::uint64_t sample_seed);

/// Reads an IDX image/label pair (magic 0x00000803 / 0x00000801). Pixels are
/// scaled to [0, 1]; no masks.
LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct BalancedSample {
  std::size_t index = 0;  // into the training set
  bool relevant = false;  // true iff the sample belongs to the target class
};

/// All samples of class `target` plus an equal number drawn without
/// replacement from the other classes, shuffled. The draw depends on
/// (seed, epoch) only.
std::vector<BalancedSample> balanced_epoch(const LabeledSet& train, int target, std::uint64_t seed,
                                           std::size_t epoch);

/// Batch tensor N x C x H x W from the given indices.
Tensor stack_images(const LabeledSet& set, std::span<const std::size_t> indices);
Tensor stack_images(const LabeledSet& set);
std::vector<int> labels_of(const LabeledSet& set);

/// Tight bounding box of a non-empty H x W mask.
BBox mask_bbox(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width);

/// Single-file cache: magic "SSDS", u32 version, u64 header length, JSON
/// header, f32 images, u8 masks.
void save_dataset(const std::filesystem::path& path, const DatasetSplits& data, const std::string& config_json);
DatasetSplits load_dataset(const std::filesystem::path& path, std::string* config_json = nullptr);

/// splitmix64-style mixing used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace subnetscope

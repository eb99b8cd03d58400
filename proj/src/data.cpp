#include "subnetscope/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <nlohmann/json.hpp>
#include <random>

#include "binary_io.hpp"
#include "subnetscope/error.hpp"

namespace subnetscope {

using json = nlohmann::json;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  h = mix(h ^ a);
  h = mix(h ^ b);
  h = mix(h ^ c);
  return h;
}

std::string_view to_string(Family f) {
  switch (f) {
    case Family::polygon: return "polygon";
    case Family::round: return "round";
    case Family::stroke: return "stroke";
  }
  return "?";
}

const std::vector<ShapeClass>& shape_classes() {
  static const std::vector<ShapeClass> classes = {
      {"triangle", Family::polygon, Generator::regular_polygon, 3},
      {"square", Family::polygon, Generator::regular_polygon, 4},
      {"pentagon", Family::polygon, Generator::regular_polygon, 5},
      {"hexagon", Family::polygon, Generator::regular_polygon, 6},
      {"circle", Family::round, Generator::ellipse, 0, 1.0, 1.0},
      {"ellipse", Family::round, Generator::ellipse, 0, 0.45, 0.6},
      {"hbar", Family::stroke, Generator::stroke, 0, 1.0, 1.0, StrokeKind::horizontal_bar},
      {"vbar", Family::stroke, Generator::stroke, 0, 1.0, 1.0, StrokeKind::vertical_bar},
      {"cross", Family::stroke, Generator::stroke, 0, 1.0, 1.0, StrokeKind::cross},
      {"ring", Family::stroke, Generator::stroke, 0, 1.0, 1.0, StrokeKind::ring},
  };
  return classes;
}

namespace {

constexpr std::size_t kMinImageSize = 12;
constexpr double kMinRadius = 0.26;
constexpr double kMaxRadius = 0.40;

enum SplitId : std::uint64_t { kTrain = 1, kVal = 2, kTest = 3 };

}  // namespace

void ShapesConfig::validate() const {
  if (image_size < kMinImageSize) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is below the minimum shape extent (" +
                      std::to_string(kMinImageSize) + ")");
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (train_per_class == 0 || val_per_class == 0 || test_per_class == 0) {
    throw ConfigError("per-class split counts must be positive");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be a finite non-negative value");
}

BBox mask_bbox(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
  BBox b{static_cast<int>(height), static_cast<int>(width), -1, -1};
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      if (!mask[i * width + j]) continue;
      b.row0 = std::min(b.row0, static_cast<int>(i));
      b.col0 = std::min(b.col0, static_cast<int>(j));
      b.row1 = std::max(b.row1, static_cast<int>(i));
      b.col1 = std::max(b.col1, static_cast<int>(j));
    }
  if (b.row1 < 0) throw DataError("mask_bbox: empty mask");
  return b;
}

LabeledImage render_shape(const ShapesConfig& config, int label, std::uint64_t sample_seed) {
  const auto& cls = shape_classes().at(static_cast<std::size_t>(label));
  const std::size_t s = config.image_size;
  const double size = static_cast<double>(s);
  std::mt19937_64 rng(sample_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double radius = uniform(kMinRadius * size, kMaxRadius * size);
  const double cy = uniform(radius + 1.0, size - radius - 1.0);
  const double cx = uniform(radius + 1.0, size - radius - 1.0);
  const double theta = uniform(0.0, 2.0 * std::numbers::pi);
  const double aspect = uniform(cls.aspect_lo, cls.aspect_hi);
  const double thickness = cls.stroke == StrokeKind::ring ? uniform(2.0, 3.5) : uniform(3.0, 5.0);

  auto inside = [&](double py, double px) {
    const double d = std::hypot(py, px);
    switch (cls.generator) {
      case Generator::regular_polygon: {
        const double sector = 2.0 * std::numbers::pi / cls.sides;
        double phi = std::atan2(py, px) - theta;
        phi = std::fmod(phi, sector);
        if (phi < 0) phi += sector;
        phi -= sector / 2.0;
        return d * std::cos(phi) <= radius * std::cos(std::numbers::pi / cls.sides);
      }
      case Generator::ellipse: {
        const double u = px * std::cos(theta) + py * std::sin(theta);
        const double v = -px * std::sin(theta) + py * std::cos(theta);
        const double b = radius * aspect;
        return (u * u) / (radius * radius) + (v * v) / (b * b) <= 1.0;
      }
      case Generator::stroke: {
        const double half = thickness / 2.0;
        const bool h = std::abs(py) <= half && std::abs(px) <= radius;
        const bool v = std::abs(px) <= half && std::abs(py) <= radius;
        switch (cls.stroke) {
          case StrokeKind::horizontal_bar: return h;
          case StrokeKind::vertical_bar: return v;
          case StrokeKind::cross: return h || v;
          case StrokeKind::ring: return d <= radius && d >= radius - thickness;
          case StrokeKind::none: return false;
        }
      }
    }
    return false;
  };

  LabeledImage out;
  out.label = label;
  out.mask.assign(s * s, 0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      out.mask[i * s + j] = inside(static_cast<double>(i) + 0.5 - cy, static_cast<double>(j) + 0.5 - cx) ? 1 : 0;
    }
  out.bbox = mask_bbox(out.mask, s, s);

  // Intensity uses 4x4 supersampled coverage; the mask stays the exact
  // pixel-centre rasterisation.
  constexpr int kSub = 4;
  std::vector<double> coverage(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      int hits = 0;
      for (int a = 0; a < kSub; ++a)
        for (int b = 0; b < kSub; ++b) {
          const double py = static_cast<double>(i) + (a + 0.5) / kSub - cy;
          const double px = static_cast<double>(j) + (b + 0.5) / kSub - cx;
          hits += inside(py, px) ? 1 : 0;
        }
      coverage[i * s + j] = static_cast<double>(hits) / (kSub * kSub);
    }

  out.image = Tensor(Shape{config.channels, s, s});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t ch = 0; ch < config.channels; ++ch) {
    const double bg = uniform(0.0, 0.25);
    const double fg = uniform(0.65, 1.0);
    for (std::size_t p = 0; p < s * s; ++p) {
      double v = bg + (fg - bg) * coverage[p];
      if (config.noise > 0.0) v += config.noise * noise(rng);
      out.image[ch * s * s + p] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

DatasetSplits generate_shapes(const ShapesConfig& config) {
  config.validate();
  DatasetSplits d;
  d.num_classes = config.num_classes();
  d.channels = config.channels;
  d.height = d.width = config.image_size;
  for (const auto& cls : shape_classes()) {
    d.class_names.push_back(cls.name);
    d.families.push_back(static_cast<int>(cls.family));
  }
  auto fill = [&](LabeledSet& set, std::size_t per_class, SplitId split) {
    set.reserve(per_class * d.num_classes);
    for (std::size_t c = 0; c < d.num_classes; ++c)
      for (std::size_t i = 0; i < per_class; ++i) {
        set.push_back(render_shape(config, static_cast<int>(c), mix_seed(config.seed, split, c, i)));
      }
  };
  fill(d.train, config.train_per_class, kTrain);
  fill(d.val, config.val_per_class, kVal);
  fill(d.test, config.test_per_class, kTest);
  return d;
}

LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  io::Reader ir(io::read_file(images));
  io::Reader lr(io::read_file(labels));
  const std::uint32_t im_magic = ir.u32_be("image magic");
  if (im_magic != 0x00000803u) throw BadMagicError("IDX images: bad magic " + std::to_string(im_magic));
  const std::uint32_t lb_magic = lr.u32_be("label magic");
  if (lb_magic != 0x00000801u) throw BadMagicError("IDX labels: bad magic " + std::to_string(lb_magic));
  const std::uint32_t n = ir.u32_be("image count");
  const std::uint32_t h = ir.u32_be("rows");
  const std::uint32_t w = ir.u32_be("cols");
  const std::uint32_t nl = lr.u32_be("label count");
  if (n != nl) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  if (h == 0 || w == 0) throw DataError("IDX images: zero-sized dimension");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  ir.need(plane * n, "image payload");
  lr.need(n, "label payload");
  LabeledSet out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    LabeledImage li;
    li.image = Tensor(Shape{1, h, w});
    for (std::size_t p = 0; p < plane; ++p) li.image[p] = ir.byte_at(ir.pos() + k * plane + p) / 255.0;
    li.label = lr.byte_at(lr.pos() + k);
    li.bbox = BBox{0, 0, static_cast<int>(h) - 1, static_cast<int>(w) - 1};
    out.push_back(std::move(li));
  }
  return out;
}

std::vector<BalancedSample> balanced_epoch(const LabeledSet& train, int target, std::uint64_t seed,
                                           std::size_t epoch) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < train.size(); ++i) (train[i].label == target ? pos : neg).push_back(i);
  if (pos.empty()) throw DataError("balanced_epoch: class " + std::to_string(target) + " has no samples");
  if (neg.size() < pos.size()) {
    throw DataError("balanced_epoch: only " + std::to_string(neg.size()) + " samples outside class " +
                    std::to_string(target) + " for " + std::to_string(pos.size()) + " in-class samples");
  }
  std::mt19937_64 rng(mix_seed(seed, 0xba1a4ced, epoch));
  // Partial Fisher-Yates: the first |pos| entries become a uniform subset.
  for (std::size_t i = 0; i < pos.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, neg.size() - 1);
    std::swap(neg[i], neg[pick(rng)]);
  }
  std::vector<BalancedSample> out;
  out.reserve(2 * pos.size());
  for (std::size_t i : pos) out.push_back({i, true});
  for (std::size_t i = 0; i < pos.size(); ++i) out.push_back({neg[i], false});
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

Tensor stack_images(const LabeledSet& set, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("stack_images: empty batch");
  const Shape& first = set.at(indices[0]).image.shape();
  const std::size_t per = shape_numel(first);
  Shape shape{indices.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor out(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Tensor& img = set.at(indices[k]).image;
    if (img.shape() != first) throw ShapeError("stack_images: inconsistent image shapes");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<long>(k * per));
  }
  return out;
}

Tensor stack_images(const LabeledSet& set) {
  std::vector<std::size_t> idx(set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_images(set, idx);
}

std::vector<int> labels_of(const LabeledSet& set) {
  std::vector<int> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(s.label);
  return out;
}

// ---------------------------------------------------------------------------
// SSDS cache

namespace {

constexpr std::string_view kDatasetMagic = "SSDS";
constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void save_dataset(const std::filesystem::path& path, const DatasetSplits& data, const std::string& config_json) {
  json header;
  header["config"] = json::parse(config_json.empty() ? "{}" : config_json);
  header["num_classes"] = data.num_classes;
  header["class_names"] = data.class_names;
  header["families"] = data.families;
  header["channels"] = data.channels;
  header["height"] = data.height;
  header["width"] = data.width;
  bool masks = true;
  json splits = json::array();
  for (auto [name, set] : {std::pair{"train", &data.train}, {"val", &data.val}, {"test", &data.test}}) {
    json labels = json::array();
    json boxes = json::array();
    for (const auto& s : *set) {
      labels.push_back(s.label);
      boxes.push_back({s.bbox.row0, s.bbox.col0, s.bbox.row1, s.bbox.col1});
      masks = masks && s.has_mask();
    }
    splits.push_back({{"name", name}, {"count", set->size()}, {"labels", labels}, {"bboxes", boxes}});
  }
  header["splits"] = splits;
  header["has_masks"] = masks;

  std::string out = io::begin_container(kDatasetMagic, kDatasetVersion, header.dump());
  for (const LabeledSet* set : {&data.train, &data.val, &data.test})
    for (const auto& s : *set)
      for (double v : s.image.data()) io::put_f32(out, v);
  if (masks) {
    for (const LabeledSet* set : {&data.train, &data.val, &data.test})
      for (const auto& s : *set) out.append(s.mask.begin(), s.mask.end());
  }
  io::write_file(path, out);
}

DatasetSplits load_dataset(const std::filesystem::path& path, std::string* config_json) {
  io::Reader r(io::read_file(path));
  json header;
  try {
    header = json::parse(io::open_container(r, kDatasetMagic, kDatasetVersion));
  } catch (const json::exception& e) {
    throw LayoutError(std::string("dataset header: ") + e.what());
  }
  DatasetSplits d;
  d.num_classes = header.at("num_classes");
  d.class_names = header.at("class_names").get<std::vector<std::string>>();
  d.families = header.at("families").get<std::vector<int>>();
  d.channels = header.at("channels");
  d.height = header.at("height");
  d.width = header.at("width");
  const bool masks = header.at("has_masks");
  if (config_json) *config_json = header.at("config").dump();

  const std::size_t per = d.channels * d.height * d.width;
  const std::size_t plane = d.height * d.width;
  std::size_t total = 0;
  for (const auto& s : header.at("splits")) total += s.at("count").get<std::size_t>();
  r.need(total * per * 4 + (masks ? total * plane : 0), "dataset payload");
  std::size_t img_off = r.pos();
  std::size_t mask_off = img_off + total * per * 4;
  LabeledSet* sets[] = {&d.train, &d.val, &d.test};
  std::size_t k = 0;
  for (const auto& s : header.at("splits")) {
    LabeledSet& set = *sets[k++];
    const auto& labels = s.at("labels");
    const auto& boxes = s.at("bboxes");
    for (std::size_t i = 0; i < s.at("count").get<std::size_t>(); ++i) {
      LabeledImage li;
      li.image = Tensor(Shape{d.channels, d.height, d.width});
      for (std::size_t p = 0; p < per; ++p) li.image[p] = r.f32_at(img_off + 4 * p);
      img_off += 4 * per;
      li.label = labels.at(i);
      li.bbox = BBox{boxes.at(i).at(0), boxes.at(i).at(1), boxes.at(i).at(2), boxes.at(i).at(3)};
      if (masks) {
        li.mask.resize(plane);
        for (std::size_t p = 0; p < plane; ++p) li.mask[p] = r.byte_at(mask_off + p);
        mask_off += plane;
      }
      set.push_back(std::move(li));
    }
  }
  return d;
}

}  // namespace subnetscope

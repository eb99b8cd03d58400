#include <algorithm>
#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "subnetscope/error.hpp"
#include "subnetscope/model.hpp"
#include "subnetscope/serialize.hpp"

namespace subnetscope {

using json = nlohmann::json;

namespace {

constexpr std::string_view kModelMagic = "SSNM";
constexpr std::uint32_t kModelVersion = 1;

}  // namespace

json spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    json j{{"kind", to_string(l.kind)}, {"gated", l.gated}};
    if (l.kind == LayerKind::conv || l.kind == LayerKind::dense) {
      j["in"] = l.in;
      j["out"] = l.out;
    }
    if (l.kind == LayerKind::conv) {
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
    }
    layers.push_back(std::move(j));
  }
  return json{{"num_classes", spec.num_classes},
              {"input", {spec.in_channels, spec.in_height, spec.in_width}},
              {"layers", std::move(layers)}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  try {
    spec.num_classes = j.at("num_classes");
    spec.in_channels = j.at("input").at(0);
    spec.in_height = j.at("input").at(1);
    spec.in_width = j.at("input").at(2);
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
      l.gated = lj.value("gated", false);
      l.in = lj.value("in", std::size_t{0});
      l.out = lj.value("out", std::size_t{0});
      l.kernel = lj.value("kernel", 0);
      l.stride = lj.value("stride", 1);
      l.padding = lj.value("padding", 0);
      spec.layers.push_back(l);
    }
  } catch (const json::exception& e) {
    throw LayoutError(std::string("model spec: ") + e.what());
  }
  try {
    spec.validate();
  } catch (const Error& e) {
    throw LayoutError(std::string("model spec: ") + e.what());
  }
  return spec;
}

std::string encode_model(const ModelSpec& spec, const Weights& weights) {
  spec.validate();
  check_weights(spec, weights);
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& [name, shape] : spec.parameter_shapes()) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    offset += shape_numel(shape) * 4;
  }
  json header{{"spec", spec_to_json(spec)}, {"tensors", std::move(tensors)}};
  std::string out = io::begin_container(kModelMagic, kModelVersion, header.dump());
  for (const auto& [name, shape] : spec.parameter_shapes())
    for (double v : weights.at(name).data()) io::put_f32(out, v);
  return out;
}

std::pair<ModelSpec, Weights> decode_model(std::string bytes) {
  io::Reader r(std::move(bytes));
  const std::string header_text = io::open_container(r, kModelMagic, kModelVersion);
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw LayoutError(std::string("model header is not valid JSON: ") + e.what());
  }
  if (!header.contains("spec") || !header.contains("tensors")) throw LayoutError("model header lacks spec/tensors");
  ModelSpec spec = spec_from_json(header.at("spec"));

  const std::size_t payload = r.pos();
  const std::size_t payload_len = r.remaining();
  std::vector<std::pair<std::size_t, std::size_t>> extents;
  Weights weights;
  for (const auto& tj : header.at("tensors")) {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = tj.at("name");
      shape = tj.at("shape").get<Shape>();
      offset = tj.at("offset");
    } catch (const json::exception& e) {
      throw LayoutError(std::string("tensor directory: ") + e.what());
    }
    const std::size_t bytes_needed = shape_numel(shape) * 4;
    if (offset % 4 != 0) throw LayoutError("tensor '" + name + "' has misaligned offset " + std::to_string(offset));
    if (offset > payload_len || bytes_needed > payload_len - offset) {
      throw TruncatedError("tensor '" + name + "' extends to byte " + std::to_string(offset + bytes_needed) +
                           " of a " + std::to_string(payload_len) + "-byte payload");
    }
    extents.emplace_back(offset, offset + bytes_needed);
    Tensor t;
    try {
      t = Tensor(shape, 0.0);
    } catch (const ShapeError& e) {
      throw LayoutError("tensor '" + name + "': " + e.what());
    }
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = r.f32_at(payload + offset + 4 * i);
    if (!weights.emplace(name, std::move(t)).second) throw LayoutError("duplicate tensor '" + name + "'");
  }
  std::sort(extents.begin(), extents.end());
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].first < extents[i - 1].second) throw LayoutError("tensor payload regions overlap");
  }
  if (weights.size() != spec.parameter_shapes().size()) {
    throw LayoutError("tensor directory lists " + std::to_string(weights.size()) + " tensors, spec needs " +
                      std::to_string(spec.parameter_shapes().size()));
  }
  try {
    check_weights(spec, weights);
  } catch (const ShapeError& e) {
    throw LayoutError(e.what());
  }
  return {std::move(spec), std::move(weights)};
}

void save_model(const std::filesystem::path& path, const ModelSpec& spec, const Weights& weights) {
  io::write_file(path, encode_model(spec, weights));
}

std::pair<ModelSpec, Weights> load_model(const std::filesystem::path& path) {
  return decode_model(io::read_file(path));
}

}  // namespace subnetscope

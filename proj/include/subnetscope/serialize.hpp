#pragma once

// JSON converters shared by the artifact writers.

#include <nlohmann/json.hpp>

#include "subnetscope/model.hpp"

namespace subnetscope {

nlohmann::json spec_to_json(const ModelSpec& spec);
/// Throws LayoutError on malformed or invalid specs.
ModelSpec spec_from_json(const nlohmann::json& j);

}  // namespace subnetscope

#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "subnetscope/tensor.hpp"

namespace subnetscope {

using NamedTensors = std::map<std::string, Tensor>;

struct AdamConfig {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment buffers, one pair per parameter name.
struct AdamState {
  NamedTensors first_moment;
  NamedTensors second_moment;
  std::size_t step = 0;

  static AdamState zeros_like(const NamedTensors& params);
};

/// One bias-corrected Adam update applied in place. Every parameter must have a
/// gradient and a moment pair of matching shape.
void adam_step(NamedTensors& params, const NamedTensors& grads, AdamState& state, const AdamConfig& config);

}  // namespace subnetscope

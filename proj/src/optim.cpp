#include "subnetscope/optim.hpp"

#include <cmath>

#include "subnetscope/error.hpp"

namespace subnetscope {

AdamState AdamState::zeros_like(const NamedTensors& params) {
  AdamState s;
  for (const auto& [name, p] : params) {
    s.first_moment.emplace(name, Tensor(p.shape(), 0.0));
    s.second_moment.emplace(name, Tensor(p.shape(), 0.0));
  }
  return s;
}

void adam_step(NamedTensors& params, const NamedTensors& grads, AdamState& state, const AdamConfig& config) {
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw Error("adam_step: missing gradient for parameter '" + name + "'");
    auto m = state.first_moment.find(name);
    auto v = state.second_moment.find(name);
    if (m == state.first_moment.end() || v == state.second_moment.end()) {
      throw Error("adam_step: missing moment buffers for parameter '" + name + "'");
    }
    if (g->second.shape() != p.shape() || m->second.shape() != p.shape() || v->second.shape() != p.shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter '" + name + "'");
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

}  // namespace subnetscope

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rfcnn/model.hpp"

namespace rfcnn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments, one array per trainable parameter.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step_count = 0;
};

/// One bias-corrected Adam update of a flat parameter. `step` is the 1-based
/// index of this update.
template <class T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const AdamConfig& cfg) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
    throw DimensionError("adam_update: gradient/moment lengths do not match the parameter");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    theta[i] = static_cast<T>(theta[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Parameters, optimizer moments, step counter and the embedded architecture.
template <class T>
struct ModelState {
  Model<T> model;
  AdamState<T> adam;

  ModelState(ArchSpec spec, std::uint64_t seed) : model(std::move(spec), seed) {
    for (const auto& p : model.parameters()) {
      adam.m.emplace_back(p.tensor.numel(), T{0});
      adam.v.emplace_back(p.tensor.numel(), T{0});
    }
  }
};

template <class T = float>
ModelState<T> instantiate(const ArchSpec& spec, std::uint64_t seed) {
  return ModelState<T>(spec, seed);
}

/// Applies one Adam step using the gradients stored on the parameters.
/// Parameters that never received a gradient are treated as g = 0.
template <class T>
void adam_step(ModelState<T>& state, const AdamConfig& cfg) {
  auto& params = state.model.parameters();
  const auto step = state.adam.step_count + 1;
  for (const auto& p : params) {
    for (auto g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainingDivergedError("non-finite gradient in '" + p.name + "'", step);
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    std::vector<T> zeros;
    std::span<const T> g = t.grad();
    if (!t.has_grad()) {
      zeros.assign(t.numel(), T{0});
      g = zeros;
    }
    adam_update<T>(t.data(), g, state.adam.m[i], state.adam.v[i], step, cfg);
  }
  state.adam.step_count = step;
}

}  // namespace rfcnn

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "shadowpool/nn.hpp"

namespace shadowpool {

// cosine schedule: base * 0.5 * (1 + cos(pi * step / total))
inline double cosine_lr(double base, size_t step, size_t total) {
  if (total < 1) throw InputError("cosine_lr: total must be >= 1");
  if (step > total) throw InputError("cosine_lr: step exceeds total");
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(phase));
}

// A mutable view of one parameter block. Biases take no weight decay.
struct ParamRef {
  std::vector<double>* value = nullptr;
  bool is_bias = false;
};

struct SgdConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  size_t total_steps = 1;
};

// SGD with momentum, weight decay, cosine schedule. Velocity buffers are
// keyed by slot index so sparse per-step updates keep untouched state intact.
struct SgdState {
  SgdConfig config;
  std::vector<std::vector<double>> velocity;

  static SgdState make(const SgdConfig& cfg, std::span<const ParamRef> params) {
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0 || cfg.weight_decay < 0.0 ||
        cfg.weight_decay >= 1.0) {
      throw InputError("SgdState: momentum and weight decay must lie in [0, 1)");
    }
    SgdState state;
    state.config = cfg;
    state.velocity.reserve(params.size());
    for (const ParamRef& p : params) {
      state.velocity.emplace_back(p.value->size(), 0.0);
    }
    return state;
  }
};

// v <- mu*v + (g + wd*w);  w <- w - lr(step)*v
// slot_indices[i] selects the velocity buffer for params[i].
inline void sgd_step(std::span<const ParamRef> params,
                     std::span<const std::vector<double>* const> grads, SgdState& state,
                     std::span<const size_t> slot_indices, size_t step_index) {
  if (params.size() != grads.size() || params.size() != slot_indices.size()) {
    throw ShapeError("sgd_step: parameter/gradient/slot count mismatch");
  }
  if (step_index >= state.config.total_steps) {
    throw InputError("sgd_step: step index exceeds schedule");
  }
  const double lr = cosine_lr(state.config.learning_rate, step_index, state.config.total_steps);
  const double mu = state.config.momentum;
  const double wd = state.config.weight_decay;
  for (size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& w = *params[i].value;
    const std::vector<double>& g = *grads[i];
    if (slot_indices[i] >= state.velocity.size()) {
      throw ShapeError("sgd_step: slot index out of range");
    }
    std::vector<double>& v = state.velocity[slot_indices[i]];
    if (w.size() != g.size() || w.size() != v.size()) {
      throw ShapeError("sgd_step: shape mismatch in slot " + std::to_string(slot_indices[i]));
    }
    const double decay = params[i].is_bias ? 0.0 : wd;
    for (size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] + (g[k] + decay * w[k]);
      w[k] -= lr * v[k];
    }
  }
}

// Convenience for dense models where slots are 0..n-1.
inline void sgd_step(std::span<const ParamRef> params,
                     std::span<const std::vector<double>* const> grads, SgdState& state,
                     size_t step_index) {
  std::vector<size_t> slots(params.size());
  for (size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  sgd_step(params, grads, state, slots, step_index);
}

inline std::vector<ParamRef> layer_params(std::vector<LinearLayer>& layers) {
  std::vector<ParamRef> refs;
  refs.reserve(layers.size() * 2);
  for (LinearLayer& layer : layers) {
    refs.push_back({&layer.weight.values, false});
    refs.push_back({&layer.bias, true});
  }
  return refs;
}

inline std::vector<const std::vector<double>*> grad_slots(const StackGradients& grads) {
  std::vector<const std::vector<double>*> slots;
  slots.reserve(grads.layers.size() * 2);
  for (const LayerGrad& lg : grads.layers) {
    slots.push_back(&lg.weight.values);
    slots.push_back(&lg.bias);
  }
  return slots;
}

}  // namespace shadowpool

// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/optim.hpp"

#include <algorithm>
#include <cmath>

#include "bistil/errors.hpp"

namespace bistil {

OptimizerState make_optimizer(const AdamWConfig& config) {
  if (config.lr < 0.0f || config.beta1 < 0.0f || config.beta1 >= 1.0f ||
      config.beta2 < 0.0f || config.beta2 >= 1.0f || config.eps <= 0.0f ||
      config.weight_decay < 0.0f || config.total_steps < 0) {
    throw ConfigError("adamw: invalid hyperparameters");
  }
  OptimizerState state;
  state.config = config;
  return state;
}

float current_lr(const OptimizerState& state) {
  const auto& c = state.config;
  if (c.total_steps <= 0) return c.lr;
  const double frac =
      1.0 - static_cast<double>(state.step) / static_cast<double>(c.total_steps);
  return c.lr * static_cast<float>(std::max(0.0, frac));
}

void adamw_step(OptimizerState& state, ParamMap& params, const MaskMap* mask) {
  const AdamWConfig& c = state.config;
  const float lr = current_lr(state);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), state.step);
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), state.step);

  for (auto& [name, param] : params) {
    if (!param.defined() || !param.requires_grad() || !param.has_grad()) continue;

    const std::vector<std::uint8_t>* entry_mask = nullptr;
    if (mask != nullptr) {
      auto it = mask->find(name);
      if (it == mask->end()) continue;
      entry_mask = &it->second;
      if (entry_mask->size() != static_cast<std::size_t>(param.numel())) {
        throw ContractError("adamw: mask size mismatch for " + name);
      }
    }

    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != static_cast<std::size_t>(param.numel())) {
      m.assign(static_cast<std::size_t>(param.numel()), 0.0f);
      v.assign(static_cast<std::size_t>(param.numel()), 0.0f);
    }

    auto data = param.data();
    auto grad = param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (entry_mask != nullptr && (*entry_mask)[i] == 0) continue;
      const float g = grad[i];
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double update =
          mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * data[i];
      data[i] -= lr * static_cast<float>(update);
    }
  }
}

void zero_gradients(ParamMap& params) {
  for (auto& [name, param] : params) {
    (void)name;
    if (param.defined()) param.zero_grad();
  }
}

}  // namespace bistil

// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay and a linear learning-rate decay to zero
// over total_steps, no warmup. Optimizer state is keyed by parameter name so
// checkpoint round trips keep moments aligned with their tensors.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bistil/tensor.hpp"

namespace bistil {

using ParamMap = std::map<std::string, Tensor>;

/// Per-parameter update mask; 1 = trainable, 0 = frozen. Frozen entries are
/// skipped entirely: value, moments and step count stay bitwise unchanged.
using MaskMap = std::map<std::string, std::vector<std::uint8_t>>;

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  /// Horizon of the linear decay; 0 disables the schedule (constant lr).
  std::int64_t total_steps = 0;
};

struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

OptimizerState make_optimizer(const AdamWConfig& config);

/// One AdamW step over every parameter that has an allocated gradient.
/// When `mask` is non-null, parameters present in it update only where the
/// mask byte is nonzero; parameters absent from a non-null mask are frozen.
/// Gradients are left in place; callers zero them between steps.
void adamw_step(OptimizerState& state, ParamMap& params, const MaskMap* mask = nullptr);

/// Effective learning rate the NEXT call to adamw_step will apply.
float current_lr(const OptimizerState& state);

void zero_gradients(ParamMap& params);

}  // namespace bistil

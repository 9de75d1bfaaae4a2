// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Lottery-Ticket Sparse Fine-Tuning. A dense phase fine-tunes the eligible
// parameters from theta_0, the top-k% by absolute change are selected, the
// model is rewound to theta_0, and a sparse phase retrains only the selected
// entries. The result is a sparse difference vector phi = theta_final -
// theta_0 that composes with other difference vectors by addition. Head
// parameters train densely through both phases, never count against the
// density budget, and are returned separately.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bistil/model.hpp"
#include "bistil/optim.hpp"

namespace bistil {

struct SftDelta {
  std::uint64_t base_fingerprint = 0;
  float density = 0.0f;
  /// Per tensor: (flat index, value) pairs, indices strictly increasing,
  /// explicit zeros never stored.
  std::map<std::string, std::vector<std::pair<std::uint64_t, float>>> entries;

  std::int64_t nnz() const;
};

using EligiblePredicate = std::function<bool(const std::string&)>;

/// Everything except head and MLM parameters (layernorm and bias included).
bool default_eligible(const std::string& name);

struct SftConfig {
  float density = 0.04f;
  int dense_steps = 1000;
  /// 0 skips the sparse phase and extracts the masked dense delta directly.
  int sparse_steps = 1000;
  float lr = 5e-5f;
  float weight_decay = 0.0f;
  int eval_interval = 100;
  /// Keep head parameters trainable in the sparse phase.
  bool train_head_dense = true;
  EligiblePredicate eligible = default_eligible;
};

struct SftHooks {
  /// Builds one training step's loss graph on the given model.
  std::function<Tensor(Model&, Rng&, int step)> step_loss;
  /// Held-out metric, lower is better; empty = keep the final parameters.
  std::function<double(const Model&)> validation;
  /// Test instrumentation: called with "dense_start", "sparse_start",
  /// "sparse_end" and the model at that moment.
  std::function<void(const std::string&, const Model&)> phase_observer;
  /// Size of the training set behind step_loss; 0 is a domain error.
  std::int64_t num_examples = 0;
};

struct SftResult {
  SftDelta delta;
  /// Dense-trained head (and MLM) parameters.
  ParamMap head_params;
  MaskMap mask;
  double best_validation = 0.0;
};

/// Mask with exactly ceil(k * N_eligible) true entries among eligible
/// parameters, chosen by largest |theta_dense - theta_0|; ties broken by
/// ascending (name, flat index). Ineligible entries are all false.
MaskMap select_topk_mask(const ParamMap& theta0, const ParamMap& theta_dense,
                         double k, const EligiblePredicate& eligible);

SftResult lt_sft_train(const Model& base, const SftHooks& hooks,
                       const SftConfig& config, Rng& rng);

/// theta + sum of difference vectors; base is unmodified. The per-index
/// delta sums are accumulated first and added to theta once, so two-delta
/// composition is bitwise order-independent.
Model apply_deltas(const Model& base, const std::vector<SftDelta>& deltas,
                   bool allow_fingerprint_mismatch = false);

// Delta directory: delta.manifest.tsv (header lines `#density` and
// `#base_fingerprint`, then `name<TAB>count` rows) + delta.bin (per tensor:
// count u64 ascending flat indices, then count fp32 values, little-endian).
void save_delta(const SftDelta& delta, const std::string& dir);
SftDelta load_delta(const std::string& dir);

}  // namespace bistil

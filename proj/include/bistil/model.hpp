// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder with task heads. Post-layernorm blocks, GELU FFN,
// learned absolute position embeddings. forward() returns the full
// activation trace (per-layer attention distributions, hidden states
// including the embedding output, and head logits) that the distillation
// losses consume.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bistil/optim.hpp"
#include "bistil/rng.hpp"
#include "bistil/tensor.hpp"
#include "bistil/vocab.hpp"

namespace bistil {

struct ModelConfig {
  int num_layers = 0;
  int hidden_dim = 0;
  int num_heads = 0;
  int ffn_dim = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  float dropout = 0.0f;
};

enum class HeadKind {
  none,
  mlm,
  token_classification,
  sequence_classification,
  span_extraction,
};

struct TaskHead {
  HeadKind kind = HeadKind::none;
  int num_labels = 0;        // token/sequence classification
  int intermediate_dim = 0;  // 0 = single layer (token cls); pooler width is
                             // always hidden_dim for sequence cls
};

const char* head_kind_name(HeadKind kind);
HeadKind head_kind_from_name(const std::string& name);

struct Model {
  ModelConfig config;
  TaskHead head;
  ParamMap params;
};

/// Per-example activations. attn[i] is [heads, l, l] post-softmax; hidden
/// runs H_0..H_L with H_0 the embedding output; logits is defined only when
/// the model carries a head.
struct ActivationTrace {
  std::vector<Tensor> attn;
  std::vector<Tensor> hidden;
  Tensor logits;
};

struct ForwardOptions {
  /// Positions whose MLM logits are wanted; empty = all positions.
  std::vector<int> mlm_positions;
  /// Enables dropout (p from config); requires rng when p > 0.
  bool training = false;
  Rng* rng = nullptr;
};

void validate_config(const ModelConfig& config);

/// Weights ~ truncated normal(0, 0.02), biases 0, layernorm gains 1, filled
/// in sorted parameter-name order so the result is a pure function of
/// (config, head, seed).
Model init_model(const ModelConfig& config, const TaskHead& head, std::uint64_t seed);

ActivationTrace forward(const Model& model, std::span<const int> input_ids,
                        std::span<const int> attention_mask,
                        const ForwardOptions& options = {});

/// Stride-downscaled student: with s = lrf, student layer j (1-based) is a
/// bitwise copy of teacher layer j*s, so the topmost teacher layer is always
/// retained. Embeddings are copied then sliced through vmap. Task heads are
/// not inherited (the MLM head is, when present).
Model init_student_from_teacher(const Model& teacher, int lrf, const VocabMap& vmap);

/// Deep copy; every parameter is a fresh trainable tensor.
Model clone_model(const Model& model);

/// base's encoder and embeddings with a different head attached; head and
/// MLM parameters come from head_params, everything else from base.
Model with_head(const Model& base, const TaskHead& head, const ParamMap& head_params);

std::int64_t count_params(const Model& model);

/// Analytic forward multiply-add count (each multiply-add = 2 ops): per
/// layer 2*(4*l*d^2 + 2*l^2*d + 2*l*d*ffn), embeddings 2*l*d, plus the
/// head's linear terms at the same convention.
std::int64_t count_flops(const ModelConfig& config, const TaskHead& head, int seq_len);

/// FNV-1a over parameter names, shapes and raw fp32 bytes.
std::uint64_t fingerprint(const Model& model);

/// Deterministic, name-sorted parameter list for a config+head.
std::vector<std::pair<std::string, std::vector<int>>> parameter_shapes(
    const ModelConfig& config, const TaskHead& head);
std::vector<std::string> parameter_names(const ModelConfig& config, const TaskHead& head);

// Checkpoint directory: manifest.tsv (name, dtype, shape, byte offset),
// weights.bin (little-endian fp32 in manifest order), vocab.txt, config.json.
struct Checkpoint {
  Model model;
  Vocabulary vocab;
};

void save_checkpoint(const Model& model, const Vocabulary& vocab,
                     const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace bistil

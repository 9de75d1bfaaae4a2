// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two distillation stages. Stage 1 distills a bilingual student from a
// language-adapted teacher with attention and hidden-state losses; Stage 2
// fine-tunes that student for a task against a task-adapted teacher with all
// three losses, using LT-SFT on the student side. Layer i of the student
// aligns with layer i*s of the teacher, s being the layer reduction factor.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bistil/data.hpp"
#include "bistil/model.hpp"
#include "bistil/sft.hpp"

namespace bistil {

struct DistillConfig {
  /// Layer reduction factor s; must divide the teacher's layer count.
  int lrf = 2;
  int steps = 2000;
  int batch_size = 8;
  int max_seq_len = 128;
  float lr = 1e-4f;
  float weight_decay = 0.0f;
  int eval_interval = 100;
  /// Loss weights; the reference objective is the plain sum.
  float w_attn = 1.0f;
  float w_hidden = 1.0f;
  float w_pred = 1.0f;
  double mlm_rate = 0.15;
  double holdout_fraction = 0.05;
  double vocab_threshold = 1e-6;
  std::uint64_t seed = 0;
  /// Stage 2 always applies the teacher's source-language SFT; this also
  /// applies the target-language SFT on top.
  bool apply_target_sft_in_stage2 = false;
  std::string source_language = "src";
  std::string target_language = "tgt";
};

void validate_distill_config(const DistillConfig& config);

/// Student layer i (1-based) pairs with teacher layer i*s; hidden pairs
/// additionally include the embedding outputs (0, 0).
struct LayerAlignment {
  int stride = 1;
  std::vector<std::pair<int, int>> attn_pairs;
  std::vector<std::pair<int, int>> hidden_pairs;
};

LayerAlignment make_alignment(int student_layers, int teacher_layers);

// Distillation losses. Means run over all tensor elements so magnitudes are
// sequence-length invariant; attention_mask rows with 0 are excluded.
Tensor loss_attn(const ActivationTrace& student, const ActivationTrace& teacher,
                 const LayerAlignment& align, std::span<const int> attention_mask);
Tensor loss_hidden(const ActivationTrace& student, const ActivationTrace& teacher,
                   const LayerAlignment& align, std::span<const int> attention_mask);
/// Soft cross entropy -sum softmax(z_T) log softmax(z_S), averaged over rows
/// (over non-pad rows in the weighted overload).
Tensor loss_pred(const Tensor& student_logits, const Tensor& teacher_logits);
Tensor loss_pred(const Tensor& student_logits, const Tensor& teacher_logits,
                 std::span<const float> row_weights);

/// Epoch-shuffled corpus cursor; reshuffles from the step rng when a batch
/// crosses an epoch boundary.
struct LanguageStream {
  std::vector<std::string> lines;
  std::vector<int> order;
  std::size_t cursor = 0;
};

struct SampledBatch {
  Language language = Language::source;
  std::vector<int> line_indices;
  Batch batch;
};

/// A fair coin picks the language, then one batch is drawn entirely from
/// that language's stream.
SampledBatch sample_language_batch(LanguageStream& src, LanguageStream& tgt,
                                   const Vocabulary& vocab, int batch_size,
                                   int max_seq_len, Rng& rng);

struct LogRow {
  int step = 0;
  double attn = 0.0;
  double hidden = 0.0;
  double pred = 0.0;
  /// Held-out loss; negative when this step had no evaluation.
  double val = -1.0;
};

struct DistillOutputs {
  Model student;
  VocabMap vmap;
  Vocabulary student_vocab;
  double initial_val = 0.0;
  double best_val = 0.0;
  std::vector<LogRow> log;

  DistillOutputs() : student_vocab(Vocabulary::special_tokens()) {}
};

/// Stage 1. The student starts as a stride-initialized, vocabulary-reduced
/// copy of the teacher; every step flips a fair coin for the language,
/// applies that language's SFT to the teacher, and minimizes
/// w_attn*L_attn + w_hidden*L_hidden on an MLM-corrupted batch. The
/// lowest held-out loss checkpoint is returned (the initial student counts
/// as a candidate, so steps == 0 returns it unchanged).
DistillOutputs general_bistillation(const Model& teacher, const SftDelta& sft_src,
                                    const SftDelta& sft_tgt,
                                    const std::vector<std::string>& src_corpus,
                                    const std::vector<std::string>& tgt_corpus,
                                    const Vocabulary& vocab,
                                    const DistillConfig& config);

struct TaskDistillInputs {
  const Model* teacher = nullptr;        // base teacher, MLM head
  const SftDelta* task_sft = nullptr;    // teacher's task difference vector
  const ParamMap* teacher_head = nullptr;
  const SftDelta* lang_src_sft = nullptr;
  /// Only consulted when config.apply_target_sft_in_stage2 is set.
  const SftDelta* lang_tgt_sft = nullptr;
  const Model* student = nullptr;  // Stage-1 output
  const TaskDataset* task_data = nullptr;
  const Vocabulary* vocab = nullptr;  // teacher vocabulary
  const VocabMap* vmap = nullptr;     // teacher ids -> student ids
};

struct TaskDistillResult {
  SftDelta delta;
  ParamMap head_params;
  MaskMap mask;
  TaskHead head;
  double best_validation = 0.0;
  std::vector<LogRow> log;
};

/// Stage 2. The teacher is fixed at theta + phi_task + phi_src (+ phi_tgt
/// behind the config flag) with its trained task head; the student gets a
/// fresh head and LT-SFT fine-tuning where each step's loss is
/// w_attn*L_attn + w_hidden*L_hidden + w_pred*L_pred against the teacher.
/// The returned delta is bound to the Stage-1 student; reconstruct the task
/// model as with_head(apply_deltas(student, {delta}), head, head_params).
TaskDistillResult task_specific_distillation(const TaskDistillInputs& inputs,
                                             const SftConfig& sft_config,
                                             const DistillConfig& config);

}  // namespace bistil

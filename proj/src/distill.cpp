// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bistil/errors.hpp"

namespace bistil {

namespace {

std::vector<float> mask_weights(std::span<const int> attention_mask) {
  std::vector<float> weights(attention_mask.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = attention_mask[i] != 0 ? 1.0f : 0.0f;
  }
  return weights;
}

std::vector<int> map_ids(std::span<const int> ids, const VocabMap& vmap) {
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out[i] = vmap.map_or_unk(ids[i]);
  }
  return out;
}

void check_pair_shapes(const Tensor& student, const Tensor& teacher,
                       std::size_t mask_len, const char* what, int layer) {
  if (student.shape() != teacher.shape()) {
    throw ContractError(std::string(what) + " shape mismatch at student layer " +
                        std::to_string(layer));
  }
  const auto& shape = student.shape();
  const int rows = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
  if (rows != static_cast<int>(mask_len)) {
    throw ContractError(std::string(what) + " sequence length " + std::to_string(rows) +
                        " does not match attention mask length " +
                        std::to_string(mask_len));
  }
}

struct Snapshot {
  std::map<std::string, std::vector<float>> values;
};

Snapshot take_snapshot(const ParamMap& params) {
  Snapshot snap;
  for (const auto& [name, tensor] : params) {
    auto data = tensor.data();
    snap.values.emplace(name, std::vector<float>(data.begin(), data.end()));
  }
  return snap;
}

void restore_snapshot(ParamMap& params, const Snapshot& snap) {
  for (auto& [name, tensor] : params) {
    const auto& saved = snap.values.at(name);
    auto data = tensor.data();
    std::copy(saved.begin(), saved.end(), data.begin());
  }
}

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

CorpusSplit split_corpus(const std::vector<std::string>& lines, double fraction,
                         Rng& rng) {
  const int n = static_cast<int>(lines.size());
  int held_out = 0;
  if (n >= 2 && fraction > 0.0) {
    held_out = static_cast<int>(std::llround(fraction * n));
    held_out = std::clamp(held_out, 1, n - 1);
  }
  CorpusSplit split;
  const std::vector<int> order = shuffle_indices(n, rng);
  for (int pos = 0; pos < n; ++pos) {
    auto& bucket = pos < held_out ? split.val : split.train;
    bucket.push_back(lines[order[pos]]);
  }
  return split;
}

}  // namespace

void validate_distill_config(const DistillConfig& config) {
  if (config.lrf < 1) throw ConfigError("lrf must be >= 1");
  if (config.steps < 0) throw ConfigError("steps must be >= 0");
  if (config.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (config.max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  if (!(config.lr > 0.0f)) throw ConfigError("lr must be positive");
  if (config.weight_decay < 0.0f) throw ConfigError("weight_decay must be >= 0");
  if (config.eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (config.w_attn < 0.0f || config.w_hidden < 0.0f || config.w_pred < 0.0f) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (!(config.mlm_rate > 0.0) || !(config.mlm_rate < 1.0)) {
    throw ConfigError("mlm_rate must lie in (0, 1)");
  }
  if (!(config.holdout_fraction >= 0.0) || !(config.holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in [0, 1)");
  }
  if (!(config.vocab_threshold >= 0.0)) {
    throw ConfigError("vocab_threshold must be >= 0");
  }
}

LayerAlignment make_alignment(int student_layers, int teacher_layers) {
  if (student_layers < 1 || teacher_layers < 1) {
    throw ConfigError("layer counts must be positive");
  }
  if (teacher_layers % student_layers != 0) {
    throw ConfigError("teacher depth " + std::to_string(teacher_layers) +
                      " is not a multiple of student depth " +
                      std::to_string(student_layers));
  }
  LayerAlignment align;
  align.stride = teacher_layers / student_layers;
  align.hidden_pairs.emplace_back(0, 0);
  for (int i = 1; i <= student_layers; ++i) {
    align.attn_pairs.emplace_back(i, i * align.stride);
    align.hidden_pairs.emplace_back(i, i * align.stride);
  }
  return align;
}

Tensor loss_attn(const ActivationTrace& student, const ActivationTrace& teacher,
                 const LayerAlignment& align, std::span<const int> attention_mask) {
  if (align.attn_pairs.empty()) throw ContractError("alignment has no attention pairs");
  if (student.attn.size() != align.attn_pairs.size()) {
    throw ContractError("student trace has " + std::to_string(student.attn.size()) +
                        " attention maps, alignment expects " +
                        std::to_string(align.attn_pairs.size()));
  }
  const std::vector<float> weights = mask_weights(attention_mask);
  Tensor total;
  bool first = true;
  for (const auto& [i, j] : align.attn_pairs) {
    if (j < 1 || static_cast<std::size_t>(j) > teacher.attn.size()) {
      throw ContractError("alignment references teacher layer " + std::to_string(j) +
                          " but the trace has " + std::to_string(teacher.attn.size()));
    }
    const Tensor& a = student.attn[static_cast<std::size_t>(i) - 1];
    const Tensor& b = teacher.attn[static_cast<std::size_t>(j) - 1];
    check_pair_shapes(a, b, attention_mask.size(), "attention", i);
    Tensor term = mse(a, b, weights);
    total = first ? term : add(total, term);
    first = false;
  }
  return scale(total, 1.0f / static_cast<float>(align.attn_pairs.size()));
}

Tensor loss_hidden(const ActivationTrace& student, const ActivationTrace& teacher,
                   const LayerAlignment& align, std::span<const int> attention_mask) {
  if (align.hidden_pairs.empty()) throw ContractError("alignment has no hidden pairs");
  if (student.hidden.size() != align.hidden_pairs.size()) {
    throw ContractError("student trace has " + std::to_string(student.hidden.size()) +
                        " hidden states, alignment expects " +
                        std::to_string(align.hidden_pairs.size()));
  }
  const std::vector<float> weights = mask_weights(attention_mask);
  Tensor total;
  bool first = true;
  for (const auto& [i, j] : align.hidden_pairs) {
    if (j < 0 || static_cast<std::size_t>(j) >= teacher.hidden.size()) {
      throw ContractError("alignment references teacher hidden state " +
                          std::to_string(j) + " but the trace has " +
                          std::to_string(teacher.hidden.size()));
    }
    const Tensor& a = student.hidden[static_cast<std::size_t>(i)];
    const Tensor& b = teacher.hidden[static_cast<std::size_t>(j)];
    if (a.shape().back() != b.shape().back()) {
      throw ContractError("hidden width mismatch at pair (" + std::to_string(i) + ", " +
                          std::to_string(j) + "): student " +
                          std::to_string(a.shape().back()) + ", teacher " +
                          std::to_string(b.shape().back()));
    }
    check_pair_shapes(a, b, attention_mask.size(), "hidden state", i);
    Tensor term = mse(a, b, weights);
    total = first ? term : add(total, term);
    first = false;
  }
  return scale(total, 1.0f / static_cast<float>(align.hidden_pairs.size()));
}

Tensor loss_pred(const Tensor& student_logits, const Tensor& teacher_logits) {
  return soft_cross_entropy(student_logits, teacher_logits);
}

Tensor loss_pred(const Tensor& student_logits, const Tensor& teacher_logits,
                 std::span<const float> row_weights) {
  return soft_cross_entropy(student_logits, teacher_logits, row_weights);
}

SampledBatch sample_language_batch(LanguageStream& src, LanguageStream& tgt,
                                   const Vocabulary& vocab, int batch_size,
                                   int max_seq_len, Rng& rng) {
  if (src.lines.empty() || tgt.lines.empty()) {
    throw DomainError("both language streams need at least one line");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const bool pick_source = rng.coin();
  LanguageStream& stream = pick_source ? src : tgt;

  SampledBatch out;
  out.language = pick_source ? Language::source : Language::target;
  std::vector<std::string> lines;
  lines.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    if (stream.cursor >= stream.order.size()) {
      stream.order = shuffle_indices(static_cast<int>(stream.lines.size()), rng);
      stream.cursor = 0;
    }
    const int idx = stream.order[stream.cursor++];
    out.line_indices.push_back(idx);
    lines.push_back(stream.lines[static_cast<std::size_t>(idx)]);
  }
  out.batch = make_batch(lines, vocab, max_seq_len);
  return out;
}

namespace {

// Weighted stage-1 objective for one sequence; fills the component values.
Tensor pair_distill_loss(const Model& teacher, Model& student,
                         std::span<const int> teacher_ids,
                         std::span<const int> student_ids,
                         std::span<const int> attention_mask,
                         const LayerAlignment& align, const DistillConfig& config,
                         double* attn_out, double* hidden_out) {
  ActivationTrace teacher_trace;
  {
    NoGradGuard guard;
    teacher_trace = forward(teacher, teacher_ids, attention_mask);
  }
  const ActivationTrace student_trace = forward(student, student_ids, attention_mask);
  Tensor la = loss_attn(student_trace, teacher_trace, align, attention_mask);
  Tensor lh = loss_hidden(student_trace, teacher_trace, align, attention_mask);
  if (attn_out != nullptr) *attn_out = la.item();
  if (hidden_out != nullptr) *hidden_out = lh.item();
  return add(scale(la, config.w_attn), scale(lh, config.w_hidden));
}

}  // namespace

DistillOutputs general_bistillation(const Model& teacher, const SftDelta& sft_src,
                                    const SftDelta& sft_tgt,
                                    const std::vector<std::string>& src_corpus,
                                    const std::vector<std::string>& tgt_corpus,
                                    const Vocabulary& vocab,
                                    const DistillConfig& config) {
  validate_distill_config(config);
  if (src_corpus.empty() || tgt_corpus.empty()) {
    throw DomainError("both corpora need at least one line");
  }
  if (teacher.config.vocab_size != vocab.size()) {
    throw ContractError("teacher vocab_size " + std::to_string(teacher.config.vocab_size) +
                        " does not match vocabulary size " + std::to_string(vocab.size()));
  }

  const Model teacher_src = apply_deltas(teacher, {sft_src});
  const Model teacher_tgt = apply_deltas(teacher, {sft_tgt});

  DistillOutputs out;
  out.vmap = reduce_vocabulary(unigram_probs(src_corpus, vocab),
                               unigram_probs(tgt_corpus, vocab), config.vocab_threshold);
  out.student_vocab = apply_vocab_map(vocab, out.vmap);
  out.student = init_student_from_teacher(teacher, config.lrf, out.vmap);
  Model& student = out.student;
  const LayerAlignment align =
      make_alignment(student.config.num_layers, teacher.config.num_layers);

  Rng root(config.seed);
  Rng split_src_rng = root.fork(1);
  Rng split_tgt_rng = root.fork(2);
  Rng batch_rng = root.fork(3);
  Rng mask_rng = root.fork(4);

  const CorpusSplit src_split = split_corpus(src_corpus, config.holdout_fraction, split_src_rng);
  const CorpusSplit tgt_split = split_corpus(tgt_corpus, config.holdout_fraction, split_tgt_rng);

  LanguageStream src_stream{src_split.train, {}, 0};
  LanguageStream tgt_stream{tgt_split.train, {}, 0};

  // Held-out loss on clean text under the matching language teacher.
  const auto evaluate = [&]() -> double {
    NoGradGuard guard;
    double total = 0.0;
    int count = 0;
    const auto eval_lines = [&](const std::vector<std::string>& lines,
                                const Model& lang_teacher) {
      for (const auto& line : lines) {
        const std::vector<int> ids = encode_line(line, vocab, config.max_seq_len);
        const std::vector<int> ones(ids.size(), 1);
        const std::vector<int> sids = map_ids(ids, out.vmap);
        Tensor loss = pair_distill_loss(lang_teacher, student, ids, sids, ones, align,
                                        config, nullptr, nullptr);
        total += loss.item();
        ++count;
      }
    };
    eval_lines(src_split.val.empty() ? src_split.train : src_split.val, teacher_src);
    eval_lines(tgt_split.val.empty() ? tgt_split.train : tgt_split.val, teacher_tgt);
    return count > 0 ? total / count : 0.0;
  };

  out.initial_val = evaluate();
  out.best_val = out.initial_val;
  Snapshot best = take_snapshot(student.params);

  OptimizerState opt = make_optimizer({config.lr, 0.9f, 0.999f, 1e-8f,
                                       config.weight_decay, config.steps});

  for (int step = 0; step < config.steps; ++step) {
    SampledBatch sampled = sample_language_batch(src_stream, tgt_stream, vocab,
                                                 config.batch_size, config.max_seq_len,
                                                 batch_rng);
    const MaskedBatch corrupted = mlm_mask(sampled.batch, config.mlm_rate, mask_rng);
    const Model& lang_teacher =
        sampled.language == Language::source ? teacher_src : teacher_tgt;

    zero_gradients(student.params);
    Tensor batch_loss;
    double attn_sum = 0.0;
    double hidden_sum = 0.0;
    const int rows = static_cast<int>(corrupted.input_ids.size());
    for (int r = 0; r < rows; ++r) {
      const std::vector<int>& ids = corrupted.input_ids[static_cast<std::size_t>(r)];
      const std::vector<int>& attention =
          corrupted.attention_mask[static_cast<std::size_t>(r)];
      const std::vector<int> sids = map_ids(ids, out.vmap);
      double attn_part = 0.0;
      double hidden_part = 0.0;
      Tensor row_loss = pair_distill_loss(lang_teacher, student, ids, sids, attention,
                                          align, config, &attn_part, &hidden_part);
      attn_sum += attn_part;
      hidden_sum += hidden_part;
      batch_loss = r == 0 ? row_loss : add(batch_loss, row_loss);
    }
    batch_loss = scale(batch_loss, 1.0f / static_cast<float>(rows));

    const double loss_value = batch_loss.item();
    if (!std::isfinite(loss_value)) {
      throw TrainingError("stage 1 loss is not finite at step " + std::to_string(step));
    }
    backward(batch_loss);
    adamw_step(opt, student.params);

    LogRow row;
    row.step = step + 1;
    row.attn = attn_sum / rows;
    row.hidden = hidden_sum / rows;
    row.pred = 0.0;
    if ((step + 1) % config.eval_interval == 0 || step + 1 == config.steps) {
      const double val = evaluate();
      row.val = val;
      if (val < out.best_val) {
        out.best_val = val;
        best = take_snapshot(student.params);
      }
    }
    out.log.push_back(row);
  }

  restore_snapshot(student.params, best);
  return out;
}

namespace {

TaskHead head_for_task(const TaskDataset& data) {
  switch (data.kind) {
    case TaskKind::token_classification:
      return TaskHead{HeadKind::token_classification,
                      static_cast<int>(data.label_vocab.size()), 0};
    case TaskKind::sequence_pair_classification:
      return TaskHead{HeadKind::sequence_classification,
                      static_cast<int>(data.label_vocab.size()), 0};
    case TaskKind::span_extraction:
      return TaskHead{HeadKind::span_extraction, 0, 0};
  }
  throw ContractError("unknown task kind");
}

// Start (column 0) and end (column 1) position scores as [1, l] rows.
Tensor span_column(const Tensor& logits, int column) {
  std::vector<float> pick(2, 0.0f);
  pick[static_cast<std::size_t>(column)] = 1.0f;
  Tensor selector = Tensor::from_data({1, 2}, std::move(pick));
  return matmul(selector, logits, /*transpose_b=*/true);
}

struct PreparedExample {
  std::vector<int> teacher_ids;
  std::vector<int> student_ids;
  std::vector<int> attention;
};

}  // namespace

TaskDistillResult task_specific_distillation(const TaskDistillInputs& inputs,
                                             const SftConfig& sft_config,
                                             const DistillConfig& config) {
  validate_distill_config(config);
  if (inputs.teacher == nullptr || inputs.task_sft == nullptr ||
      inputs.teacher_head == nullptr || inputs.lang_src_sft == nullptr ||
      inputs.student == nullptr || inputs.task_data == nullptr ||
      inputs.vocab == nullptr || inputs.vmap == nullptr) {
    throw ContractError("task distillation inputs are incomplete");
  }
  if (config.apply_target_sft_in_stage2 && inputs.lang_tgt_sft == nullptr) {
    throw ContractError("target-language SFT requested but not supplied");
  }
  const TaskDataset& data = *inputs.task_data;
  if (data.examples.empty()) throw DomainError("task dataset is empty");
  if (inputs.vmap->old_size != inputs.vocab->size()) {
    throw ContractError("vocab map covers " + std::to_string(inputs.vmap->old_size) +
                        " ids, vocabulary has " + std::to_string(inputs.vocab->size()));
  }
  if (inputs.teacher->config.vocab_size != inputs.vocab->size()) {
    throw ContractError("teacher vocab_size does not match the vocabulary");
  }
  if (inputs.student->config.vocab_size != inputs.vmap->new_size()) {
    throw ContractError("student vocab_size does not match the vocab map");
  }

  const TaskHead head = head_for_task(data);

  std::vector<SftDelta> teacher_deltas{*inputs.task_sft, *inputs.lang_src_sft};
  if (config.apply_target_sft_in_stage2) teacher_deltas.push_back(*inputs.lang_tgt_sft);
  const Model teacher_composed = apply_deltas(*inputs.teacher, teacher_deltas);
  const Model teacher_task = with_head(teacher_composed, head, *inputs.teacher_head);

  // Fresh head for the student; encoder weights come from Stage 1.
  const Model head_donor =
      init_model(inputs.student->config, head, config.seed ^ 0x9e3779b97f4a7c15ULL);
  ParamMap donor_head;
  for (const auto& [name, tensor] : head_donor.params) {
    if (!default_eligible(name)) donor_head.emplace(name, tensor);
  }
  Model student_task = with_head(*inputs.student, head, donor_head);

  const LayerAlignment align = make_alignment(student_task.config.num_layers,
                                              teacher_task.config.num_layers);

  // Encode once; teacher traces are fixed, so cache them up front.
  std::vector<PreparedExample> prepared;
  std::vector<ActivationTrace> teacher_traces;
  prepared.reserve(data.examples.size());
  for (const auto& example : data.examples) {
    EncodedExample enc = encode_example(example, data.kind, *inputs.vocab,
                                        config.max_seq_len);
    if (data.kind == TaskKind::span_extraction && enc.span_start < 0) continue;
    PreparedExample p;
    p.teacher_ids = std::move(enc.input_ids);
    p.attention = std::move(enc.attention_mask);
    p.student_ids = map_ids(p.teacher_ids, *inputs.vmap);
    prepared.push_back(std::move(p));
  }
  if (prepared.empty()) throw DomainError("no usable examples after encoding");
  {
    NoGradGuard guard;
    teacher_traces.reserve(prepared.size());
    for (const auto& p : prepared) {
      teacher_traces.push_back(forward(teacher_task, p.teacher_ids, p.attention));
    }
  }

  Rng root(config.seed);
  Rng split_rng = root.fork(11);
  const int n = static_cast<int>(prepared.size());
  int held_out = 0;
  if (n >= 2 && config.holdout_fraction > 0.0) {
    held_out = static_cast<int>(std::llround(config.holdout_fraction * n));
    held_out = std::clamp(held_out, 1, n - 1);
  }
  const std::vector<int> order = shuffle_indices(n, split_rng);
  std::vector<int> val_idx(order.begin(), order.begin() + held_out);
  std::vector<int> train_idx(order.begin() + held_out, order.end());

  TaskDistillResult result;
  result.head = head;

  // References stay valid: everything captured lives in this frame until
  // lt_sft_train returns.
  const auto example_loss = [&](const Model& m, int index, double* attn_out,
                                double* hidden_out, double* pred_out) -> Tensor {
    const PreparedExample& p = prepared[static_cast<std::size_t>(index)];
    const ActivationTrace& tt = teacher_traces[static_cast<std::size_t>(index)];
    const ActivationTrace st = forward(m, p.student_ids, p.attention);
    Tensor total;
    bool first = true;
    if (config.w_attn > 0.0f) {
      Tensor la = loss_attn(st, tt, align, p.attention);
      if (attn_out != nullptr) *attn_out = la.item();
      total = scale(la, config.w_attn);
      first = false;
    }
    if (config.w_hidden > 0.0f) {
      Tensor lh = loss_hidden(st, tt, align, p.attention);
      if (hidden_out != nullptr) *hidden_out = lh.item();
      Tensor term = scale(lh, config.w_hidden);
      total = first ? term : add(total, term);
      first = false;
    }
    if (config.w_pred > 0.0f) {
      Tensor lp;
      if (data.kind == TaskKind::span_extraction) {
        Tensor s_start = span_column(st.logits, 0);
        Tensor s_end = span_column(st.logits, 1);
        Tensor t_start = span_column(tt.logits, 0);
        Tensor t_end = span_column(tt.logits, 1);
        lp = scale(add(loss_pred(s_start, t_start), loss_pred(s_end, t_end)), 0.5f);
      } else {
        lp = loss_pred(st.logits, tt.logits);
      }
      if (pred_out != nullptr) *pred_out = lp.item();
      Tensor term = scale(lp, config.w_pred);
      total = first ? term : add(total, term);
      first = false;
    }
    if (first) total = Tensor::scalar(0.0f);
    return total;
  };

  auto epoch_order = std::make_shared<std::vector<int>>();
  auto cursor = std::make_shared<std::size_t>(0);
  auto global_step = std::make_shared<int>(0);

  SftHooks hooks;
  hooks.num_examples = static_cast<std::int64_t>(train_idx.size());
  hooks.step_loss = [&, epoch_order, cursor, global_step](Model& m, Rng& rng,
                                                          int /*step*/) -> Tensor {
    Tensor batch_loss;
    double attn_sum = 0.0;
    double hidden_sum = 0.0;
    double pred_sum = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      if (*cursor >= epoch_order->size()) {
        *epoch_order = shuffle_indices(static_cast<int>(train_idx.size()), rng);
        *cursor = 0;
      }
      const int index = train_idx[static_cast<std::size_t>((*epoch_order)[(*cursor)++])];
      double attn_part = 0.0;
      double hidden_part = 0.0;
      double pred_part = 0.0;
      Tensor term = example_loss(m, index, &attn_part, &hidden_part, &pred_part);
      attn_sum += attn_part;
      hidden_sum += hidden_part;
      pred_sum += pred_part;
      batch_loss = b == 0 ? term : add(batch_loss, term);
    }
    batch_loss = scale(batch_loss, 1.0f / static_cast<float>(config.batch_size));
    LogRow row;
    row.step = ++*global_step;
    row.attn = attn_sum / config.batch_size;
    row.hidden = hidden_sum / config.batch_size;
    row.pred = pred_sum / config.batch_size;
    result.log.push_back(row);
    return batch_loss;
  };
  if (!val_idx.empty()) {
    hooks.validation = [&](const Model& m) -> double {
      NoGradGuard guard;
      double total = 0.0;
      for (const int index : val_idx) {
        total += example_loss(m, index, nullptr, nullptr, nullptr).item();
      }
      const double val = total / static_cast<double>(val_idx.size());
      if (!result.log.empty()) result.log.back().val = val;
      return val;
    };
  }

  Rng train_rng = root.fork(12);
  SftResult sft = lt_sft_train(student_task, hooks, sft_config, train_rng);
  result.delta = std::move(sft.delta);
  // The delta touches encoder and embedding parameters only, so rebind it to
  // the head-free Stage-1 student; that is the base consumers compose onto.
  result.delta.base_fingerprint = fingerprint(*inputs.student);
  result.head_params = std::move(sft.head_params);
  result.mask = std::move(sft.mask);
  result.best_validation = sft.best_validation;
  return result;
}

}  // namespace bistil

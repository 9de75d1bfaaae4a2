// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver for the full pipeline: corpus generation, teacher
// pretraining, language/task sparse fine-tuning, two-stage distillation,
// evaluation and benchmarking. One command per process; every
// artifact-producing run writes a run.json manifest next to its outputs.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "bistil/data.hpp"
#include "bistil/distill.hpp"
#include "bistil/errors.hpp"
#include "bistil/eval.hpp"
#include "bistil/model.hpp"
#include "bistil/optim.hpp"
#include "bistil/rng.hpp"
#include "bistil/sft.hpp"
#include "bistil/tensor.hpp"
#include "bistil/vocab.hpp"
#include "json.hpp"

#ifndef BISTIL_GIT_DESCRIBE
#define BISTIL_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace bistil {
namespace {

constexpr std::uint64_t kDefaultSeed = 42;

// ---------------------------------------------------------------------------
// Small shared plumbing.

void require_exists(const std::string& path, const std::string& flag) {
  if (!fs::exists(path)) {
    throw ConfigError(flag + ": no such path '" + path + "'");
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& line : lines) out << line << '\n';
}

int env_thread_cap() {
  const char* raw = std::getenv("BISTIL_THREADS");
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (raw != nullptr) {
    try {
      threads = std::min(threads, std::max(1, std::stoi(raw)));
    } catch (const std::exception&) {
      throw ConfigError("BISTIL_THREADS: not an integer: '" + std::string(raw) + "'");
    }
  }
  return threads;
}

// Flat key/value manifest with the effective value of every option. No
// timestamps, so rerunning with the same flags reproduces it byte for byte.
void write_manifest(const CLI::App& cmd, const std::string& out_dir) {
  json manifest;
  manifest["command"] = cmd.get_name();
  manifest["git_describe"] = BISTIL_GIT_DESCRIBE;
  for (const CLI::Option* opt : cmd.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      for (std::size_t i = 0; i < results.size(); ++i) {
        if (i > 0) value += ',';
        value += results[i];
      }
      if (opt->get_expected_min() == 0 && results.empty()) value = "true";
    } else if (opt->get_expected_min() == 0) {
      value = "false";
    } else {
      value = opt->get_default_str();
    }
    manifest[name] = value;
  }
  std::ofstream out(out_dir + "/run.json");
  if (!out) throw IoError("cannot write '" + out_dir + "/run.json'");
  out << manifest.dump(2) << '\n';
}

void write_distill_log(const std::vector<LogRow>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "step\tloss_attn\tloss_hidden\tloss_pred\tval_loss\n";
  char buffer[160];
  for (const LogRow& row : log) {
    if (row.val >= 0.0) {
      std::snprintf(buffer, sizeof(buffer), "%d\t%.6f\t%.6f\t%.6f\t%.6f\n", row.step,
                    row.attn, row.hidden, row.pred, row.val);
    } else {
      std::snprintf(buffer, sizeof(buffer), "%d\t%.6f\t%.6f\t%.6f\t-\n", row.step,
                    row.attn, row.hidden, row.pred);
    }
    out << buffer;
  }
}

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double val = -1.0;
};

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "step\tloss\tval_loss\n";
  char buffer[96];
  for (const TrainLogRow& row : log) {
    if (row.val >= 0.0) {
      std::snprintf(buffer, sizeof(buffer), "%d\t%.6f\t%.6f\n", row.step, row.loss,
                    row.val);
    } else {
      std::snprintf(buffer, sizeof(buffer), "%d\t%.6f\t-\n", row.step, row.loss);
    }
    out << buffer;
  }
}

// vmap.tsv: `old_size<TAB>N` header, then the kept old ids in order.
void save_vmap(const VocabMap& map, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "old_size\t" << map.old_size << '\n';
  for (int old_id : map.kept) out << old_id << '\n';
}

VocabMap load_vmap(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: empty vmap file");
  VocabMap map;
  if (std::sscanf(line.c_str(), "old_size\t%d", &map.old_size) != 1) {
    throw ParseError(path + ":1: expected 'old_size<TAB>N'");
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const int old_id = std::stoi(line);
      map.old_to_new[old_id] = static_cast<int>(map.kept.size());
      map.kept.push_back(old_id);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": bad token id");
    }
  }
  return map;
}

TaskKind resolve_task_kind(const std::string& name) {
  if (name == "token") return TaskKind::token_classification;
  if (name == "pair") return TaskKind::sequence_pair_classification;
  if (name == "span") return TaskKind::span_extraction;
  return task_kind_from_name(name);
}

std::vector<std::string> split_commas(const std::string& joined) {
  std::vector<std::string> parts;
  std::stringstream in(joined);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Shared training helpers.

// Endless epoch stream over 0..n-1, reshuffled by rng at each wrap.
struct LineStream {
  int n = 0;
  std::vector<int> order;
  std::size_t cursor = 0;

  std::vector<int> next(int count, Rng& rng) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      if (cursor >= order.size()) {
        order = shuffle_indices(n, rng);
        cursor = 0;
      }
      out.push_back(order[cursor++]);
    }
    return out;
  }
};

// Validation-set carve-out: shuffled, first ceil(frac*n) indices (at least
// one example on each side). frac == 0 or n < 2 leaves validation empty.
void split_examples(int n, double frac, Rng& rng, std::vector<int>* train,
                    std::vector<int>* val) {
  train->clear();
  val->clear();
  if (n < 2 || frac <= 0.0) {
    for (int i = 0; i < n; ++i) train->push_back(i);
    return;
  }
  const auto order = shuffle_indices(n, rng);
  int k = static_cast<int>(std::llround(frac * n));
  k = std::max(1, std::min(k, n - 1));
  for (int i = 0; i < n; ++i) {
    (i < k ? val : train)->push_back(order[static_cast<std::size_t>(i)]);
  }
}

// Mean MLM loss over the chosen lines; undefined tensor when no position
// was masked (the caller skips such steps).
Tensor mlm_loss(Model& model, const std::vector<std::string>& lines,
                const std::vector<int>& chosen, const Vocabulary& vocab,
                int max_seq_len, double rate, Rng& rng) {
  std::vector<std::string> batch_lines;
  batch_lines.reserve(chosen.size());
  for (int idx : chosen) batch_lines.push_back(lines[static_cast<std::size_t>(idx)]);
  const Batch batch = make_batch(batch_lines, vocab, max_seq_len);
  const MaskedBatch masked = mlm_mask(batch, rate, rng);

  Tensor total;
  int rows = 0;
  for (std::size_t r = 0; r < masked.input_ids.size(); ++r) {
    ForwardOptions options;
    std::vector<int> labels;
    for (std::size_t p = 0; p < masked.mlm_labels[r].size(); ++p) {
      if (masked.mlm_labels[r][p] == kIgnoreLabel) continue;
      options.mlm_positions.push_back(static_cast<int>(p));
      labels.push_back(masked.mlm_labels[r][p]);
    }
    if (labels.empty()) continue;
    const ActivationTrace trace =
        forward(model, masked.input_ids[r], masked.attention_mask[r], options);
    const Tensor loss = cross_entropy(trace.logits, labels);
    total = total.defined() ? add(total, loss) : loss;
    ++rows;
  }
  if (rows == 0) return Tensor();
  return scale(total, 1.0f / static_cast<float>(rows));
}

// Deterministic held-out MLM loss: a fresh rng per call keeps the mask
// pattern identical across evaluations, so values are comparable.
double mlm_validation(const Model& model_const, const std::vector<std::string>& lines,
                      const std::vector<int>& val_idx, const Vocabulary& vocab,
                      int max_seq_len, double rate, std::uint64_t seed) {
  NoGradGuard guard;
  Model& model = const_cast<Model&>(model_const);
  Rng rng(seed);
  double total = 0.0;
  int batches = 0;
  for (std::size_t i = 0; i < val_idx.size(); i += 16) {
    std::vector<int> chosen(val_idx.begin() + static_cast<std::ptrdiff_t>(i),
                            val_idx.begin() + static_cast<std::ptrdiff_t>(
                                                  std::min(i + 16, val_idx.size())));
    const Tensor loss = mlm_loss(model, lines, chosen, vocab, max_seq_len, rate, rng);
    if (!loss.defined()) continue;
    total += loss.item();
    ++batches;
  }
  return batches == 0 ? 0.0 : total / batches;
}

Tensor span_column(const Tensor& logits, int column) {
  const Tensor selector = Tensor::from_data(
      {1, 2}, {column == 0 ? 1.0f : 0.0f, column == 1 ? 1.0f : 0.0f});
  return matmul(selector, logits, /*transpose_b=*/true);
}

// Supervised loss for one encoded task example; undefined for span examples
// whose answer was lost to truncation.
Tensor task_loss(Model& model, const EncodedExample& enc, TaskKind kind) {
  const ActivationTrace trace = forward(model, enc.input_ids, enc.attention_mask);
  switch (kind) {
    case TaskKind::token_classification:
      return cross_entropy(trace.logits, enc.token_labels);
    case TaskKind::sequence_pair_classification: {
      const std::vector<int> labels{enc.label};
      return cross_entropy(trace.logits, labels);
    }
    case TaskKind::span_extraction: {
      if (enc.span_start < 0) return Tensor();
      const std::vector<int> starts{enc.span_start};
      const std::vector<int> ends{enc.span_end};
      const Tensor s = cross_entropy(span_column(trace.logits, 0), starts);
      const Tensor e = cross_entropy(span_column(trace.logits, 1), ends);
      return scale(add(s, e), 0.5f);
    }
  }
  throw ContractError("unknown task kind");
}

TaskHead head_for(TaskKind kind, int num_labels) {
  switch (kind) {
    case TaskKind::token_classification:
      return TaskHead{HeadKind::token_classification, num_labels, 0};
    case TaskKind::sequence_pair_classification:
      return TaskHead{HeadKind::sequence_classification, num_labels, 0};
    case TaskKind::span_extraction:
      return TaskHead{HeadKind::span_extraction, 0, 0};
  }
  throw ContractError("unknown task kind");
}

ParamMap extract_head_params(const Model& model) {
  ParamMap head;
  for (const auto& [name, tensor] : model.params) {
    if (!default_eligible(name)) head[name] = tensor;
  }
  return head;
}

// ---------------------------------------------------------------------------
// Subcommand option bags. One struct per command, flags mirror config keys.

struct GenCorpusOpts {
  std::string out;
  std::uint64_t seed = kDefaultSeed;
  int lines = 400;
  int latent_vocab = 48;
  double overlap = 0.3;
  double eval_fraction = 0.2;
  int pair_count = 0;  // 0: one pair per line
};

struct PretrainOpts {
  std::string src, tgt, out;
  std::uint64_t seed = kDefaultSeed;
  int layers = 4, hidden = 32, heads = 4, ffn = 128;
  int max_seq_len = 32, vocab_size = 800;
  int steps = 600, batch_size = 8, eval_interval = 50;
  double lr = 3e-3, weight_decay = 0.01, mlm_rate = 0.15, holdout = 0.05;
};

struct LangSftOpts {
  std::string teacher, corpus, out;
  std::uint64_t seed = kDefaultSeed;
  double density = 0.04;
  int dense_steps = 150, sparse_steps = 150, batch_size = 8, eval_interval = 50;
  double lr = 1e-3, mlm_rate = 0.15, holdout = 0.05;
};

struct TaskSftOpts {
  std::string teacher, task_data, task = "token", labels, out;
  std::uint64_t seed = kDefaultSeed;
  double density = 0.08;
  int dense_steps = 200, sparse_steps = 200, batch_size = 8, eval_interval = 50;
  double lr = 3e-3, holdout = 0.1;
};

struct DistilGeneralOpts {
  std::string teacher, src, tgt, out;
  std::vector<std::string> lang_sft;
  std::uint64_t seed = kDefaultSeed;
  int lrf = 2, steps = 400, batch_size = 8, eval_interval = 50, max_seq_len = 128;
  double lr = 1e-3, weight_decay = 0.0, mlm_rate = 0.15, holdout = 0.05;
  double vocab_threshold = 1e-6;
  double w_attn = 1.0, w_hidden = 1.0;
};

struct DistilTaskOpts {
  std::string teacher, task_sft, student, task_data, task = "token", labels, out;
  std::vector<std::string> lang_sft;
  std::uint64_t seed = kDefaultSeed;
  double density = 0.08;
  int dense_steps = 200, sparse_steps = 200, batch_size = 8, eval_interval = 50;
  double lr = 3e-3, holdout = 0.1;
  double w_attn = 1.0, w_hidden = 1.0, w_pred = 1.0;
  bool apply_target_sft = false;
};

struct EvaluateOpts {
  std::string model, task_data, task = "token", labels, out;
};

struct BenchOpts {
  std::string model, reference, task_data, task = "token", out;
  int repetitions = 7, max_examples = 32;
};

// ---------------------------------------------------------------------------
// Command bodies. Each validates inputs fully before creating its out dir.

void run_gen_corpus(const GenCorpusOpts& o, const CLI::App& cmd) {
  if (o.lines < 4) throw ConfigError("--lines: need at least 4");
  if (o.overlap < 0.0 || o.overlap > 1.0) throw ConfigError("--overlap: want [0, 1]");
  if (o.eval_fraction <= 0.0 || o.eval_fraction >= 1.0) {
    throw ConfigError("--eval-fraction: want (0, 1)");
  }
  fs::create_directories(o.out);

  const SynthCorpus corpus =
      synth_bilingual_corpus(o.seed, o.latent_vocab, o.lines, o.overlap);
  write_lines(corpus.src_lines, o.out + "/corpus.src.txt");
  write_lines(corpus.tgt_lines, o.out + "/corpus.tgt.txt");

  const int pair_count = o.pair_count > 0 ? o.pair_count : o.lines;
  const auto split_and_save = [&](const TaskDataset& data, const std::string& stem,
                                  const std::string& ext) {
    const int n = static_cast<int>(data.examples.size());
    const int eval_n = std::max(1, static_cast<int>(std::llround(o.eval_fraction * n)));
    TaskDataset train = data;
    TaskDataset eval = data;
    train.examples.assign(data.examples.begin(), data.examples.end() - eval_n);
    eval.examples.assign(data.examples.end() - eval_n, data.examples.end());
    save_task_dataset(train, o.out + "/" + stem + ".train." + ext);
    save_task_dataset(eval, o.out + "/" + stem + ".eval." + ext);
  };
  for (Language lang : {Language::source, Language::target}) {
    const std::string tag = lang == Language::source ? "src" : "tgt";
    split_and_save(derive_token_task(corpus, lang), "token." + tag, "tsv");
    split_and_save(derive_pair_task(corpus, lang, pair_count, o.seed ^ 0x70), "pair." + tag,
                   "tsv");
    split_and_save(derive_span_task(corpus, lang), "span." + tag, "jsonl");
  }
  write_manifest(cmd, o.out);
  std::printf("gen-corpus: %d lines, lexicon %zu, outputs in %s\n", o.lines,
              corpus.lexicon.size(), o.out.c_str());
}

void run_pretrain(const PretrainOpts& o, const CLI::App& cmd) {
  require_exists(o.src, "--src");
  require_exists(o.tgt, "--tgt");
  ModelConfig config;
  config.num_layers = o.layers;
  config.hidden_dim = o.hidden;
  config.num_heads = o.heads;
  config.ffn_dim = o.ffn;
  config.max_seq_len = o.max_seq_len;
  config.vocab_size = kNumSpecialTokens;  // placeholder until the vocab is built
  validate_config(config);
  if (o.steps < 0 || o.batch_size < 1) throw ConfigError("--steps/--batch-size: bad value");
  if (o.mlm_rate <= 0.0 || o.mlm_rate >= 1.0) throw ConfigError("--mlm-rate: want (0, 1)");

  std::vector<std::string> corpus = read_lines(o.src);
  const std::vector<std::string> tgt_lines = read_lines(o.tgt);
  corpus.insert(corpus.end(), tgt_lines.begin(), tgt_lines.end());
  if (corpus.empty()) throw DataError("pretraining corpora are empty");

  const Vocabulary vocab = build_vocabulary(corpus, o.vocab_size);
  config.vocab_size = vocab.size();
  validate_config(config);
  Model model = init_model(config, TaskHead{HeadKind::mlm, 0, 0}, o.seed);

  fs::create_directories(o.out);
  Rng root(o.seed);
  Rng split_rng = root.fork(1);
  Rng batch_rng = root.fork(2);
  Rng mask_rng = root.fork(3);
  std::vector<int> train_idx, val_idx;
  split_examples(static_cast<int>(corpus.size()), o.holdout, split_rng, &train_idx,
                 &val_idx);
  std::vector<std::string> train_lines;
  for (int idx : train_idx) train_lines.push_back(corpus[static_cast<std::size_t>(idx)]);
  std::vector<int> val_all;
  for (std::size_t i = 0; i < val_idx.size(); ++i) val_all.push_back(static_cast<int>(i));
  std::vector<std::string> val_lines;
  for (int idx : val_idx) val_lines.push_back(corpus[static_cast<std::size_t>(idx)]);

  AdamWConfig adamw;
  adamw.lr = static_cast<float>(o.lr);
  adamw.weight_decay = static_cast<float>(o.weight_decay);
  adamw.total_steps = o.steps;
  OptimizerState optimizer = make_optimizer(adamw);

  LineStream stream{static_cast<int>(train_lines.size()), {}, 0};
  std::vector<TrainLogRow> log;
  for (int step = 0; step < o.steps; ++step) {
    const auto chosen = stream.next(o.batch_size, batch_rng);
    const Tensor loss =
        mlm_loss(model, train_lines, chosen, vocab, o.max_seq_len, o.mlm_rate, mask_rng);
    TrainLogRow row;
    row.step = step + 1;
    if (loss.defined()) {
      row.loss = loss.item();
      if (!std::isfinite(row.loss)) {
        throw TrainingError("pretraining loss is not finite at step " +
                            std::to_string(step + 1));
      }
      zero_gradients(model.params);
      backward(loss);
      adamw_step(optimizer, model.params);
    }
    if (!val_lines.empty() &&
        ((step + 1) % o.eval_interval == 0 || step + 1 == o.steps)) {
      row.val = mlm_validation(model, val_lines, val_all, vocab, o.max_seq_len,
                               o.mlm_rate, o.seed ^ 0x5eed);
    }
    log.push_back(row);
  }

  save_checkpoint(model, vocab, o.out);
  write_train_log(log, o.out + "/log.tsv");
  write_manifest(cmd, o.out);
  std::printf("pretrain-teacher: %lld params, vocab %d, checkpoint in %s\n",
              static_cast<long long>(count_params(model)), vocab.size(), o.out.c_str());
}

void run_lang_sft(const LangSftOpts& o, const CLI::App& cmd) {
  require_exists(o.teacher, "--teacher");
  require_exists(o.corpus, "--corpus");
  if (o.density <= 0.0 || o.density > 1.0) throw ConfigError("--density: want (0, 1]");

  const Checkpoint teacher = load_checkpoint(o.teacher);
  const std::vector<std::string> corpus = read_lines(o.corpus);
  if (corpus.empty()) throw DataError("language corpus is empty");
  const int max_seq_len = teacher.model.config.max_seq_len;

  fs::create_directories(o.out);
  Rng root(o.seed);
  Rng split_rng = root.fork(1);
  std::vector<int> train_idx, val_idx;
  split_examples(static_cast<int>(corpus.size()), o.holdout, split_rng, &train_idx,
                 &val_idx);
  std::vector<std::string> train_lines;
  for (int idx : train_idx) train_lines.push_back(corpus[static_cast<std::size_t>(idx)]);
  std::vector<std::string> val_lines;
  for (int idx : val_idx) val_lines.push_back(corpus[static_cast<std::size_t>(idx)]);
  std::vector<int> val_all;
  for (std::size_t i = 0; i < val_lines.size(); ++i) val_all.push_back(static_cast<int>(i));

  auto stream = std::make_shared<LineStream>();
  stream->n = static_cast<int>(train_lines.size());
  auto log = std::make_shared<std::vector<TrainLogRow>>();
  auto global_step = std::make_shared<int>(0);

  SftHooks hooks;
  hooks.num_examples = static_cast<std::int64_t>(train_lines.size());
  hooks.step_loss = [&, stream, log, global_step](Model& model, Rng& rng, int) {
    const auto chosen = stream->next(o.batch_size, rng);
    Tensor loss = mlm_loss(model, train_lines, chosen, teacher.vocab, max_seq_len,
                           o.mlm_rate, rng);
    if (!loss.defined()) loss = Tensor::scalar(0.0f);
    ++*global_step;
    log->push_back({*global_step, loss.item(), -1.0});
    return loss;
  };
  if (!val_lines.empty()) {
    hooks.validation = [&](const Model& model) {
      const double val = mlm_validation(model, val_lines, val_all, teacher.vocab,
                                        max_seq_len, o.mlm_rate, o.seed ^ 0x5eed);
      if (!log->empty()) log->back().val = val;
      return val;
    };
  }

  SftConfig config;
  config.density = static_cast<float>(o.density);
  config.dense_steps = o.dense_steps;
  config.sparse_steps = o.sparse_steps;
  config.lr = static_cast<float>(o.lr);
  config.eval_interval = o.eval_interval;
  Rng train_rng = root.fork(2);
  const SftResult result = lt_sft_train(teacher.model, hooks, config, train_rng);

  save_delta(result.delta, o.out + "/delta");
  write_train_log(*log, o.out + "/log.tsv");
  write_manifest(cmd, o.out);
  std::printf("train-lang-sft: delta nnz %lld (density %.3f), best val %.4f, in %s\n",
              static_cast<long long>(result.delta.nnz()), o.density,
              result.best_validation, o.out.c_str());
}

void run_task_sft(const TaskSftOpts& o, const CLI::App& cmd) {
  require_exists(o.teacher, "--teacher");
  require_exists(o.task_data, "--task-data");
  if (o.density <= 0.0 || o.density > 1.0) throw ConfigError("--density: want (0, 1]");
  const TaskKind kind = resolve_task_kind(o.task);

  const Checkpoint teacher = load_checkpoint(o.teacher);
  const std::vector<std::string> label_vocab = split_commas(o.labels);
  const TaskDataset data = load_task_dataset(o.task_data, kind,
                                             label_vocab.empty() ? nullptr : &label_vocab);
  if (data.examples.empty()) throw DataError("task dataset is empty");
  const int max_seq_len = teacher.model.config.max_seq_len;

  const TaskHead head = head_for(kind, static_cast<int>(data.label_vocab.size()));
  const Model donor = init_model(teacher.model.config, head, o.seed ^ 0x9e3779b97f4a7c15ULL);
  const Model base = with_head(teacher.model, head, extract_head_params(donor));

  std::vector<EncodedExample> encoded;
  encoded.reserve(data.examples.size());
  for (const TaskExample& example : data.examples) {
    encoded.push_back(encode_example(example, kind, teacher.vocab, max_seq_len));
  }

  fs::create_directories(o.out);
  Rng root(o.seed);
  Rng split_rng = root.fork(1);
  std::vector<int> train_idx, val_idx;
  split_examples(static_cast<int>(encoded.size()), o.holdout, split_rng, &train_idx,
                 &val_idx);

  auto stream = std::make_shared<LineStream>();
  stream->n = static_cast<int>(train_idx.size());
  auto log = std::make_shared<std::vector<TrainLogRow>>();
  auto global_step = std::make_shared<int>(0);

  SftHooks hooks;
  hooks.num_examples = static_cast<std::int64_t>(train_idx.size());
  hooks.step_loss = [&, stream, log, global_step](Model& model, Rng& rng, int) {
    const auto chosen = stream->next(o.batch_size, rng);
    Tensor total;
    int rows = 0;
    for (int pick : chosen) {
      const EncodedExample& enc = encoded[static_cast<std::size_t>(train_idx[pick])];
      const Tensor loss = task_loss(model, enc, kind);
      if (!loss.defined()) continue;
      total = total.defined() ? add(total, loss) : loss;
      ++rows;
    }
    Tensor loss = rows > 0 ? scale(total, 1.0f / static_cast<float>(rows))
                           : Tensor::scalar(0.0f);
    ++*global_step;
    log->push_back({*global_step, loss.item(), -1.0});
    return loss;
  };
  if (!val_idx.empty()) {
    hooks.validation = [&](const Model& model_const) {
      NoGradGuard guard;
      Model& model = const_cast<Model&>(model_const);
      double total = 0.0;
      int rows = 0;
      for (int idx : val_idx) {
        const Tensor loss = task_loss(model, encoded[static_cast<std::size_t>(idx)], kind);
        if (!loss.defined()) continue;
        total += loss.item();
        ++rows;
      }
      const double val = rows > 0 ? total / rows : 0.0;
      if (!log->empty()) log->back().val = val;
      return val;
    };
  }

  SftConfig config;
  config.density = static_cast<float>(o.density);
  config.dense_steps = o.dense_steps;
  config.sparse_steps = o.sparse_steps;
  config.lr = static_cast<float>(o.lr);
  config.eval_interval = o.eval_interval;
  Rng train_rng = root.fork(2);
  SftResult result = lt_sft_train(base, hooks, config, train_rng);
  // The delta touches encoder and embedding parameters only, all untouched
  // by the head swap; rebind it to the published teacher checkpoint.
  result.delta.base_fingerprint = fingerprint(teacher.model);

  const Model task_model =
      with_head(apply_deltas(teacher.model, {result.delta}), head, result.head_params);
  save_delta(result.delta, o.out + "/delta");
  save_checkpoint(task_model, teacher.vocab, o.out + "/model");
  write_train_log(*log, o.out + "/log.tsv");
  write_manifest(cmd, o.out);
  std::printf("train-task-sft: delta nnz %lld, best val %.4f, task model in %s/model\n",
              static_cast<long long>(result.delta.nnz()), result.best_validation,
              o.out.c_str());
}

void run_distil_general(const DistilGeneralOpts& o, const CLI::App& cmd) {
  require_exists(o.teacher, "--teacher");
  require_exists(o.src, "--src");
  require_exists(o.tgt, "--tgt");
  if (o.lang_sft.size() != 2) {
    throw ConfigError("--lang-sft: expected exactly two deltas (source, target)");
  }
  for (const auto& dir : o.lang_sft) require_exists(dir, "--lang-sft");

  DistillConfig config;
  config.lrf = o.lrf;
  config.steps = o.steps;
  config.batch_size = o.batch_size;
  config.max_seq_len = o.max_seq_len;
  config.lr = static_cast<float>(o.lr);
  config.weight_decay = static_cast<float>(o.weight_decay);
  config.eval_interval = o.eval_interval;
  config.w_attn = static_cast<float>(o.w_attn);
  config.w_hidden = static_cast<float>(o.w_hidden);
  config.mlm_rate = o.mlm_rate;
  config.holdout_fraction = o.holdout;
  config.vocab_threshold = o.vocab_threshold;
  config.seed = o.seed;
  validate_distill_config(config);

  const Checkpoint teacher = load_checkpoint(o.teacher);
  const SftDelta sft_src = load_delta(o.lang_sft[0] + "/delta");
  const SftDelta sft_tgt = load_delta(o.lang_sft[1] + "/delta");
  const std::vector<std::string> src_corpus = read_lines(o.src);
  const std::vector<std::string> tgt_corpus = read_lines(o.tgt);

  fs::create_directories(o.out);
  const DistillOutputs outputs = general_bistillation(teacher.model, sft_src, sft_tgt,
                                                      src_corpus, tgt_corpus,
                                                      teacher.vocab, config);

  save_checkpoint(outputs.student, outputs.student_vocab, o.out + "/student");
  save_vmap(outputs.vmap, o.out + "/vmap.tsv");
  write_distill_log(outputs.log, o.out + "/log.tsv");
  write_manifest(cmd, o.out);
  std::printf(
      "distil-general: student %lld params (teacher %lld), val %.4f -> %.4f, in %s\n",
      static_cast<long long>(count_params(outputs.student)),
      static_cast<long long>(count_params(teacher.model)), outputs.initial_val,
      outputs.best_val, o.out.c_str());
}

void run_distil_task(const DistilTaskOpts& o, const CLI::App& cmd) {
  require_exists(o.teacher, "--teacher");
  require_exists(o.task_sft, "--task-sft");
  require_exists(o.student, "--student");
  require_exists(o.task_data, "--task-data");
  if (o.lang_sft.empty() || o.lang_sft.size() > 2) {
    throw ConfigError("--lang-sft: expected one or two deltas (source[, target])");
  }
  for (const auto& dir : o.lang_sft) require_exists(dir, "--lang-sft");
  if (o.apply_target_sft && o.lang_sft.size() < 2) {
    throw ConfigError("--apply-target-sft needs a second --lang-sft delta");
  }
  const TaskKind kind = resolve_task_kind(o.task);

  DistillConfig config;
  config.lrf = 1;  // the student is already downscaled
  config.steps = o.dense_steps;
  config.batch_size = o.batch_size;
  config.eval_interval = o.eval_interval;
  config.w_attn = static_cast<float>(o.w_attn);
  config.w_hidden = static_cast<float>(o.w_hidden);
  config.w_pred = static_cast<float>(o.w_pred);
  config.holdout_fraction = o.holdout;
  config.seed = o.seed;
  config.apply_target_sft_in_stage2 = o.apply_target_sft;

  SftConfig sft_config;
  sft_config.density = static_cast<float>(o.density);
  sft_config.dense_steps = o.dense_steps;
  sft_config.sparse_steps = o.sparse_steps;
  sft_config.lr = static_cast<float>(o.lr);
  sft_config.eval_interval = o.eval_interval;

  const Checkpoint teacher = load_checkpoint(o.teacher);
  config.max_seq_len = teacher.model.config.max_seq_len;
  validate_distill_config(config);
  const Checkpoint student = load_checkpoint(o.student + "/student");
  const VocabMap vmap = load_vmap(o.student + "/vmap.tsv");
  const SftDelta task_delta = load_delta(o.task_sft + "/delta");
  const Checkpoint task_model = load_checkpoint(o.task_sft + "/model");
  const ParamMap teacher_head = extract_head_params(task_model.model);
  const SftDelta lang_src = load_delta(o.lang_sft[0] + "/delta");
  SftDelta lang_tgt;
  if (o.lang_sft.size() == 2) lang_tgt = load_delta(o.lang_sft[1] + "/delta");

  const std::vector<std::string> label_vocab = split_commas(o.labels);
  const TaskDataset data = load_task_dataset(o.task_data, kind,
                                             label_vocab.empty() ? nullptr : &label_vocab);

  fs::create_directories(o.out);
  TaskDistillInputs inputs;
  inputs.teacher = &teacher.model;
  inputs.task_sft = &task_delta;
  inputs.teacher_head = &teacher_head;
  inputs.lang_src_sft = &lang_src;
  inputs.lang_tgt_sft = o.lang_sft.size() == 2 ? &lang_tgt : nullptr;
  inputs.student = &student.model;
  inputs.task_data = &data;
  inputs.vocab = &teacher.vocab;
  inputs.vmap = &vmap;
  const TaskDistillResult result = task_specific_distillation(inputs, sft_config, config);

  const Model final_model = with_head(apply_deltas(student.model, {result.delta}),
                                      result.head, result.head_params);
  save_delta(result.delta, o.out + "/delta");
  save_checkpoint(final_model, student.vocab, o.out + "/model");
  write_distill_log(result.log, o.out + "/log.tsv");
  write_manifest(cmd, o.out);
  std::printf("distil-task: delta nnz %lld, best val %.4f, task model in %s/model\n",
              static_cast<long long>(result.delta.nnz()), result.best_validation,
              o.out.c_str());
}

void run_evaluate(const EvaluateOpts& o, const CLI::App& cmd) {
  require_exists(o.model, "--model");
  require_exists(o.task_data, "--task-data");
  const TaskKind kind = resolve_task_kind(o.task);

  const Checkpoint checkpoint = load_checkpoint(o.model);
  const std::vector<std::string> label_vocab = split_commas(o.labels);
  const TaskDataset data = load_task_dataset(o.task_data, kind,
                                             label_vocab.empty() ? nullptr : &label_vocab);
  const EvalReport report =
      evaluate(checkpoint.model, data, checkpoint.vocab, env_thread_cap());

  std::ostringstream out;
  char buffer[128];
  out << "name\tvalue\n";
  out << "metric\t" << report.metric << '\n';
  std::snprintf(buffer, sizeof(buffer), "value\t%.2f\n", report.value);
  out << buffer;
  out << "examples\t" << report.example_count << '\n';
  for (const auto& [key, value] : report.secondary) {
    std::snprintf(buffer, sizeof(buffer), "secondary.%s\t%.2f\n", key.c_str(), value);
    out << buffer;
  }
  for (const auto& [key, value] : report.per_class) {
    std::snprintf(buffer, sizeof(buffer), "class.%s\t%.2f\n", key.c_str(), value);
    out << buffer;
  }

  std::fputs(out.str().c_str(), stdout);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream file(o.out + "/report.tsv");
    if (!file) throw IoError("cannot write '" + o.out + "/report.tsv'");
    file << out.str();
    write_manifest(cmd, o.out);
  }
}

void run_bench(const BenchOpts& o, const CLI::App& cmd) {
  require_exists(o.model, "--model");
  require_exists(o.task_data, "--task-data");
  if (!o.reference.empty()) require_exists(o.reference, "--reference");
  const TaskKind kind = resolve_task_kind(o.task);

  const Checkpoint checkpoint = load_checkpoint(o.model);
  std::unique_ptr<Checkpoint> reference;
  if (!o.reference.empty()) {
    reference = std::make_unique<Checkpoint>(load_checkpoint(o.reference));
  }

  const TaskDataset data = load_task_dataset(o.task_data, kind);
  std::vector<std::vector<int>> sample;
  const int limit = std::min<int>(o.max_examples, static_cast<int>(data.examples.size()));
  for (int i = 0; i < limit; ++i) {
    sample.push_back(encode_example(data.examples[static_cast<std::size_t>(i)], kind,
                                    checkpoint.vocab,
                                    checkpoint.model.config.max_seq_len)
                         .input_ids);
  }

  const EfficiencyReport report =
      measure_efficiency(checkpoint.model, sample,
                         reference ? &reference->model : nullptr, o.repetitions);

  std::ostringstream out;
  char buffer[256];
  out << "params\tflops_per_example\tseconds_per_example\tsamples\trepetitions"
         "\tparam_ratio\tflop_ratio\tspeed_ratio\n";
  if (report.has_reference) {
    std::snprintf(buffer, sizeof(buffer), "%lld\t%.0f\t%.6e\t%d\t%d\t%.4f\t%.4f\t%.4f\n",
                  static_cast<long long>(report.param_count), report.flops_per_example,
                  report.seconds_per_example, report.sample_count, report.repetitions,
                  report.param_ratio, report.flop_ratio, report.speed_ratio);
  } else {
    std::snprintf(buffer, sizeof(buffer), "%lld\t%.0f\t%.6e\t%d\t%d\t-\t-\t-\n",
                  static_cast<long long>(report.param_count), report.flops_per_example,
                  report.seconds_per_example, report.sample_count, report.repetitions);
  }
  out << buffer;

  std::fputs(out.str().c_str(), stdout);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream file(o.out + "/bench.tsv");
    if (!file) throw IoError("cannot write '" + o.out + "/bench.tsv'");
    file << out.str();
    write_manifest(cmd, o.out);
  }
}

// ---------------------------------------------------------------------------
// Flag wiring.

int run_main(int argc, char** argv) {
  CLI::App app{"bistil: bilingual distillation pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "INI config file; keys mirror a subcommand's flags under its "
                 "[subcommand] section, and command-line values win");
  app.footer("Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 training error.");

  auto gen = std::make_shared<GenCorpusOpts>();
  CLI::App* gen_cmd = app.add_subcommand(
      "gen-corpus", "Generate a synthetic bilingual corpus with task datasets");
  gen_cmd->add_option("--out", gen->out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen->seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--lines", gen->lines, "Corpus lines per language")->capture_default_str();
  gen_cmd->add_option("--latent-vocab", gen->latent_vocab, "Latent lexicon size")->capture_default_str();
  gen_cmd->add_option("--overlap", gen->overlap, "Shared-surface lexeme fraction")->capture_default_str();
  gen_cmd->add_option("--eval-fraction", gen->eval_fraction,
                      "Tail fraction held out as eval split")->capture_default_str();
  gen_cmd->add_option("--pair-count", gen->pair_count,
                      "Pair-task examples (0: one per line)")->capture_default_str();
  gen_cmd->callback([gen, gen_cmd] { run_gen_corpus(*gen, *gen_cmd); });

  auto pre = std::make_shared<PretrainOpts>();
  CLI::App* pre_cmd =
      app.add_subcommand("pretrain-teacher", "Pretrain the MLM teacher on two corpora");
  pre_cmd->add_option("--src", pre->src, "Source-language corpus")->required();
  pre_cmd->add_option("--tgt", pre->tgt, "Target-language corpus")->required();
  pre_cmd->add_option("--out", pre->out, "Checkpoint directory")->required();
  pre_cmd->add_option("--seed", pre->seed, "Random seed")->capture_default_str();
  pre_cmd->add_option("--layers", pre->layers, "Encoder layers")->capture_default_str();
  pre_cmd->add_option("--hidden", pre->hidden, "Hidden width")->capture_default_str();
  pre_cmd->add_option("--heads", pre->heads, "Attention heads")->capture_default_str();
  pre_cmd->add_option("--ffn", pre->ffn, "Feed-forward width")->capture_default_str();
  pre_cmd->add_option("--max-seq-len", pre->max_seq_len, "Maximum sequence length")->capture_default_str();
  pre_cmd->add_option("--vocab-size", pre->vocab_size, "Vocabulary cap")->capture_default_str();
  pre_cmd->add_option("--steps", pre->steps, "Optimizer steps")->capture_default_str();
  pre_cmd->add_option("--batch-size", pre->batch_size, "Lines per step")->capture_default_str();
  pre_cmd->add_option("--lr", pre->lr, "Peak learning rate")->capture_default_str();
  pre_cmd->add_option("--weight-decay", pre->weight_decay, "AdamW weight decay")->capture_default_str();
  pre_cmd->add_option("--mlm-rate", pre->mlm_rate, "Masking rate")->capture_default_str();
  pre_cmd->add_option("--holdout", pre->holdout, "Validation fraction")->capture_default_str();
  pre_cmd->add_option("--eval-interval", pre->eval_interval, "Steps between evals")->capture_default_str();
  pre_cmd->callback([pre, pre_cmd] { run_pretrain(*pre, *pre_cmd); });

  auto lang = std::make_shared<LangSftOpts>();
  CLI::App* lang_cmd = app.add_subcommand(
      "train-lang-sft", "Train a sparse language difference vector on the teacher");
  lang_cmd->add_option("--teacher", lang->teacher, "Teacher checkpoint")->required();
  lang_cmd->add_option("--corpus", lang->corpus, "Single-language corpus")->required();
  lang_cmd->add_option("--out", lang->out, "Output directory")->required();
  lang_cmd->add_option("--seed", lang->seed, "Random seed")->capture_default_str();
  lang_cmd->add_option("--density", lang->density, "Trainable-parameter fraction")->capture_default_str();
  lang_cmd->add_option("--dense-steps", lang->dense_steps, "Dense-phase steps")->capture_default_str();
  lang_cmd->add_option("--sparse-steps", lang->sparse_steps, "Sparse-phase steps")->capture_default_str();
  lang_cmd->add_option("--batch-size", lang->batch_size, "Lines per step")->capture_default_str();
  lang_cmd->add_option("--lr", lang->lr, "Learning rate")->capture_default_str();
  lang_cmd->add_option("--mlm-rate", lang->mlm_rate, "Masking rate")->capture_default_str();
  lang_cmd->add_option("--holdout", lang->holdout, "Validation fraction")->capture_default_str();
  lang_cmd->add_option("--eval-interval", lang->eval_interval, "Steps between evals")->capture_default_str();
  lang_cmd->callback([lang, lang_cmd] { run_lang_sft(*lang, *lang_cmd); });

  auto task = std::make_shared<TaskSftOpts>();
  CLI::App* task_cmd = app.add_subcommand(
      "train-task-sft", "Train a sparse task difference vector plus task head");
  task_cmd->add_option("--teacher", task->teacher, "Teacher checkpoint")->required();
  task_cmd->add_option("--task-data", task->task_data, "Task dataset")->required();
  task_cmd->add_option("--task", task->task,
                       "Task kind: token, pair or span (long names accepted)")->capture_default_str();
  task_cmd->add_option("--labels", task->labels,
                       "Comma-separated label vocabulary (default: from the file)");
  task_cmd->add_option("--out", task->out, "Output directory")->required();
  task_cmd->add_option("--seed", task->seed, "Random seed")->capture_default_str();
  task_cmd->add_option("--density", task->density, "Trainable-parameter fraction")->capture_default_str();
  task_cmd->add_option("--dense-steps", task->dense_steps, "Dense-phase steps")->capture_default_str();
  task_cmd->add_option("--sparse-steps", task->sparse_steps, "Sparse-phase steps")->capture_default_str();
  task_cmd->add_option("--batch-size", task->batch_size, "Examples per step")->capture_default_str();
  task_cmd->add_option("--lr", task->lr, "Learning rate")->capture_default_str();
  task_cmd->add_option("--holdout", task->holdout, "Validation fraction")->capture_default_str();
  task_cmd->add_option("--eval-interval", task->eval_interval, "Steps between evals")->capture_default_str();
  task_cmd->callback([task, task_cmd] { run_task_sft(*task, *task_cmd); });

  auto dg = std::make_shared<DistilGeneralOpts>();
  CLI::App* dg_cmd = app.add_subcommand(
      "distil-general", "Stage 1: distil a bilingual student from the teacher");
  dg_cmd->add_option("--teacher", dg->teacher, "Teacher checkpoint")->required();
  dg_cmd->add_option("--lang-sft", dg->lang_sft,
                     "Language SFT directories, source then target (repeatable)")
      ->required();
  dg_cmd->add_option("--src", dg->src, "Source-language corpus")->required();
  dg_cmd->add_option("--tgt", dg->tgt, "Target-language corpus")->required();
  dg_cmd->add_option("--out", dg->out, "Output directory")->required();
  dg_cmd->add_option("--seed", dg->seed, "Random seed")->capture_default_str();
  dg_cmd->add_option("--lrf", dg->lrf, "Layer reduction factor")->capture_default_str();
  dg_cmd->add_option("--steps", dg->steps, "Optimizer steps")->capture_default_str();
  dg_cmd->add_option("--batch-size", dg->batch_size, "Lines per step")->capture_default_str();
  dg_cmd->add_option("--max-seq-len", dg->max_seq_len, "Sequence length cap")->capture_default_str();
  dg_cmd->add_option("--lr", dg->lr, "Learning rate")->capture_default_str();
  dg_cmd->add_option("--weight-decay", dg->weight_decay, "AdamW weight decay")->capture_default_str();
  dg_cmd->add_option("--mlm-rate", dg->mlm_rate, "Masking rate")->capture_default_str();
  dg_cmd->add_option("--holdout", dg->holdout, "Validation fraction")->capture_default_str();
  dg_cmd->add_option("--vocab-threshold", dg->vocab_threshold,
                     "Unigram probability threshold for keeping tokens")->capture_default_str();
  dg_cmd->add_option("--w-attn", dg->w_attn, "Attention loss weight")->capture_default_str();
  dg_cmd->add_option("--w-hidden", dg->w_hidden, "Hidden loss weight")->capture_default_str();
  dg_cmd->add_option("--eval-interval", dg->eval_interval, "Steps between evals")->capture_default_str();
  dg_cmd->callback([dg, dg_cmd] { run_distil_general(*dg, *dg_cmd); });

  auto dt = std::make_shared<DistilTaskOpts>();
  CLI::App* dt_cmd = app.add_subcommand(
      "distil-task", "Stage 2: task-specific distillation into the student");
  dt_cmd->add_option("--teacher", dt->teacher, "Teacher checkpoint")->required();
  dt_cmd->add_option("--task-sft", dt->task_sft, "train-task-sft output directory")
      ->required();
  dt_cmd->add_option("--lang-sft", dt->lang_sft,
                     "Language SFT directories, source first (repeatable)")
      ->required();
  dt_cmd->add_option("--student", dt->student, "distil-general output directory")
      ->required();
  dt_cmd->add_option("--task-data", dt->task_data, "Task dataset")->required();
  dt_cmd->add_option("--task", dt->task,
                     "Task kind: token, pair or span (long names accepted)")->capture_default_str();
  dt_cmd->add_option("--labels", dt->labels,
                     "Comma-separated label vocabulary (default: from the file)");
  dt_cmd->add_option("--out", dt->out, "Output directory")->required();
  dt_cmd->add_option("--seed", dt->seed, "Random seed")->capture_default_str();
  dt_cmd->add_option("--density", dt->density, "Trainable-parameter fraction")->capture_default_str();
  dt_cmd->add_option("--dense-steps", dt->dense_steps, "Dense-phase steps")->capture_default_str();
  dt_cmd->add_option("--sparse-steps", dt->sparse_steps, "Sparse-phase steps")->capture_default_str();
  dt_cmd->add_option("--batch-size", dt->batch_size, "Examples per step")->capture_default_str();
  dt_cmd->add_option("--lr", dt->lr, "Learning rate")->capture_default_str();
  dt_cmd->add_option("--holdout", dt->holdout, "Validation fraction")->capture_default_str();
  dt_cmd->add_option("--w-attn", dt->w_attn, "Attention loss weight")->capture_default_str();
  dt_cmd->add_option("--w-hidden", dt->w_hidden, "Hidden loss weight")->capture_default_str();
  dt_cmd->add_option("--w-pred", dt->w_pred, "Prediction loss weight")->capture_default_str();
  dt_cmd->add_flag("--apply-target-sft", dt->apply_target_sft,
                   "Also apply the target-language SFT to the teacher");
  dt_cmd->add_option("--eval-interval", dt->eval_interval, "Steps between evals")->capture_default_str();
  dt_cmd->callback([dt, dt_cmd] { run_distil_task(*dt, *dt_cmd); });

  auto ev = std::make_shared<EvaluateOpts>();
  CLI::App* ev_cmd = app.add_subcommand(
      "evaluate",
      "Score a task model; TSV rows: metric, value, examples, secondary.*, class.*");
  ev_cmd->add_option("--model", ev->model, "Task model checkpoint")->required();
  ev_cmd->add_option("--task-data", ev->task_data, "Task dataset")->required();
  ev_cmd->add_option("--task", ev->task,
                     "Task kind: token, pair or span (long names accepted)")->capture_default_str();
  ev_cmd->add_option("--labels", ev->labels,
                     "Comma-separated label vocabulary (default: from the file)");
  ev_cmd->add_option("--out", ev->out,
                     "Optional directory for report.tsv and run.json");
  ev_cmd->callback([ev, ev_cmd] { run_evaluate(*ev, *ev_cmd); });

  auto be = std::make_shared<BenchOpts>();
  CLI::App* be_cmd = app.add_subcommand(
      "bench",
      "Measure efficiency; TSV columns: params, flops_per_example, "
      "seconds_per_example, samples, repetitions, param_ratio, flop_ratio, speed_ratio");
  be_cmd->add_option("--model", be->model, "Model checkpoint")->required();
  be_cmd->add_option("--reference", be->reference, "Reference checkpoint for ratios");
  be_cmd->add_option("--task-data", be->task_data, "Dataset supplying sample inputs")
      ->required();
  be_cmd->add_option("--task", be->task,
                     "Task kind: token, pair or span (long names accepted)")->capture_default_str();
  be_cmd->add_option("--repetitions", be->repetitions, "Timing repetitions")->capture_default_str();
  be_cmd->add_option("--max-examples", be->max_examples, "Sample size cap")->capture_default_str();
  be_cmd->add_option("--out", be->out, "Optional directory for bench.tsv and run.json");
  be_cmd->callback([be, be_cmd] { run_bench(*be, *be_cmd); });

  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 3;
  } catch (const bistil::ParseError& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 2;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bistil: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace
}  // namespace bistil

int main(int argc, char** argv) { return bistil::run_main(argc, argv); }

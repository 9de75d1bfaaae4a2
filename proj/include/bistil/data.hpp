// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Corpus and task-dataset handling: MLM masking, batch assembly, loaders and
// writers for the three downstream task formats, and a synthetic
// bilingual-corpus generator. The generator builds two surface languages
// over one latent stream (a bijective lexicon per language), so every line
// carries ground-truth topic and entity structure in both languages and
// cross-lingual transfer is measurable at desk scale.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bistil/rng.hpp"
#include "bistil/vocab.hpp"

namespace bistil {

// ---------------------------------------------------------------------------
// Batches and MLM masking.

struct Batch {
  std::vector<std::vector<int>> input_ids;
  std::vector<std::vector<int>> attention_mask;
  /// Size of the vocabulary the ids were drawn from; random-replacement
  /// masking samples from it.
  int vocab_size = 0;
};

struct MaskedBatch {
  std::vector<std::vector<int>> input_ids;
  std::vector<std::vector<int>> attention_mask;
  /// Original token id at masked positions, kIgnoreLabel elsewhere.
  std::vector<std::vector<int>> mlm_labels;
};

/// Standard MLM corruption: every non-special position with attention is
/// selected with probability `rate`; of the selected, 80% become [MASK], 10%
/// a random non-special token, 10% stay unchanged. Rows are scanned in
/// order, so output is a pure function of (batch, rate, rng state).
MaskedBatch mlm_mask(const Batch& batch, double rate, Rng& rng);

/// [CLS] tokens [SEP], truncated to max_seq_len (the final [SEP] survives).
std::vector<int> encode_line(const std::string& line, const Vocabulary& vocab,
                             int max_seq_len);

/// [CLS] first [SEP] second [SEP] with the same truncation rule.
std::vector<int> encode_pair(const std::string& first, const std::string& second,
                             const Vocabulary& vocab, int max_seq_len);

/// Encodes each line and pads everything to the longest row with [PAD].
Batch make_batch(const std::vector<std::string>& lines, const Vocabulary& vocab,
                 int max_seq_len);

/// Fisher-Yates permutation of 0..n-1 driven by rng.
std::vector<int> shuffle_indices(int n, Rng& rng);

// ---------------------------------------------------------------------------
// Task datasets.

enum class TaskKind {
  token_classification,
  sequence_pair_classification,
  span_extraction,
};

std::string task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

struct TaskExample {
  // token_classification
  std::vector<std::string> tokens;
  std::vector<int> token_labels;
  // sequence_pair_classification
  std::string premise;
  std::string hypothesis;
  int label = -1;
  // span_extraction
  std::string context;
  std::string question;
  std::string answer_text;
  int answer_start = -1;  // character offset into context
};

struct TaskDataset {
  TaskKind kind = TaskKind::token_classification;
  std::vector<TaskExample> examples;
  /// Label id -> name, sorted; empty for span extraction.
  std::vector<std::string> label_vocab;
};

// Formats: token classification is CoNLL-style `token<TAB>label` with blank
// lines between sentences; pair classification is TSV
// `premise<TAB>hypothesis<TAB>label`; span extraction is JSON lines with
// context, question, answer_start and answer_text fields.
//
// Without `label_vocab` the label set is collected from the file and sorted;
// with it, any label outside the given vocabulary is a data error.
TaskDataset load_task_dataset(const std::string& path, TaskKind kind,
                              const std::vector<std::string>* label_vocab = nullptr);
void save_task_dataset(const TaskDataset& dataset, const std::string& path);

/// Model-ready encoding of one example. For token classification, labels
/// sit on the first piece of each word and kIgnoreLabel everywhere else.
/// For span extraction, span_start/span_end are inclusive token positions of
/// the answer, or -1 when truncation dropped it.
struct EncodedExample {
  std::vector<int> input_ids;
  std::vector<int> attention_mask;
  std::vector<int> token_labels;
  int label = -1;
  int span_start = -1;
  int span_end = -1;
};

EncodedExample encode_example(const TaskExample& example, TaskKind kind,
                              const Vocabulary& vocab, int max_seq_len);

// ---------------------------------------------------------------------------
// Synthetic bilingual corpus.

enum class Language { source, target };

struct SynthWord {
  enum class Kind { function_word, common, entity, query };
  std::string src;
  std::string tgt;
  Kind kind = Kind::common;
  /// 0-based topic; -1 for function words.
  int topic = -1;
};

struct SynthLine {
  std::vector<int> word_ids;     // latent ids into the lexicon
  std::vector<std::string> bio;  // per word: O, B-Tk or I-Tk
  int topic = 0;
};

struct SynthCorpus {
  std::vector<SynthWord> lexicon;
  std::vector<SynthLine> lines;
  std::vector<std::string> src_lines;
  std::vector<std::string> tgt_lines;
  int num_topics = 0;

  std::string render(const SynthLine& line, Language lang) const;
};

/// Two languages from one latent stream. `vocab_size` is the latent lexicon
/// size (floored at 24), `overlap` the fraction of lexemes whose surface
/// form is shared between the languages. Output is a pure function of the
/// arguments.
SynthCorpus synth_bilingual_corpus(std::uint64_t seed, int vocab_size, int lines,
                                   double overlap);

/// BIO entity labeling over whole lines (at most `count`, 0 = all).
TaskDataset derive_token_task(const SynthCorpus& corpus, Language lang, int count = 0);

/// Same-topic versus different-topic line pairs, balanced by construction.
TaskDataset derive_pair_task(const SynthCorpus& corpus, Language lang, int count,
                             std::uint64_t seed);

/// One example per (line, topic) whose entity run is unique in its line;
/// the question is the topic's query word.
TaskDataset derive_span_task(const SynthCorpus& corpus, Language lang, int count = 0);

}  // namespace bistil

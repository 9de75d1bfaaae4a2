// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subword vocabulary, WordPiece-style greedy tokenizer, unigram statistics
// and the vocabulary-reduction step that shrinks a student's embedding
// matrix to the tokens of a language pair.

#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "bistil/errors.hpp"

namespace bistil {

struct Model;

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecialTokens = 5;

/// Immutable after construction; safe for shared read-only use.
class Vocabulary {
 public:
  /// Tokens must be unique, with the five special tokens at ids 0..4.
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// -1 when absent.
  int id_of(const std::string& token) const;
  bool contains(const std::string& token) const;
  int max_token_length() const { return max_token_length_; }

  static const std::vector<std::string>& special_tokens();

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int max_token_length_ = 0;
};

struct VocabMap {
  std::vector<int> kept;  // sorted old ids; doubles as new_to_old
  std::map<int, int> old_to_new;
  int old_size = 0;

  int new_size() const { return static_cast<int>(kept.size()); }
  /// Remap an old id; dropped tokens collapse to UNK.
  int map_or_unk(int old_id) const;
};

/// Frequency-ranked vocabulary over whitespace-split words: special tokens,
/// then every seen character piece (word-initial and "##" continuation), then
/// whole words by descending count (ties lexicographic) up to max_size.
Vocabulary build_vocabulary(const std::vector<std::string>& corpus, int max_size);

/// Greedy longest-match segmentation; continuation pieces carry a "##"
/// prefix. A word with an uncoverable span becomes a single UNK. No CLS/SEP
/// framing here; sequence assembly is the caller's job.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);

/// Reassemble tokenized text; inverse of tokenize up to whitespace
/// normalization when no UNK was produced.
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

/// Unnormalized-to-normalized unigram distribution over tokenize() output.
std::vector<double> unigram_probs(const std::vector<std::string>& corpus,
                                  const Vocabulary& vocab);

/// Keep special tokens plus every token whose probability reaches the
/// threshold in either corpus (the comparison is >=, ties kept).
VocabMap reduce_vocabulary(const std::vector<double>& p_src,
                           const std::vector<double>& p_tgt,
                           double threshold = 1e-6);

VocabMap identity_vocab_map(int vocab_size);

Vocabulary apply_vocab_map(const Vocabulary& vocab, const VocabMap& map);

/// Copy of the model with input-embedding rows (and the tied output bias)
/// restricted to the kept ids, in old_to_new order.
Model slice_embeddings(const Model& model, const VocabMap& map);

// File formats: vocabulary = UTF-8, one token per line, line number = id;
// probability dump = TSV `token<TAB>prob`.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);
void save_unigram_probs(const Vocabulary& vocab, const std::vector<double>& probs,
                        const std::string& path);

}  // namespace bistil

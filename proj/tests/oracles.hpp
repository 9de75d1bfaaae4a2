// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations, written independently of the
// library code paths they validate. Favor clarity over speed.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bistil/vocab.hpp"

namespace oracles {

// Longest-match segmentation of a single word by scanning the entire token
// list at every position, memoized on position.
inline std::vector<int> longest_match_word(const std::string& word,
                                           const bistil::Vocabulary& vocab) {
  std::vector<int> pieces;
  std::size_t pos = 0;
  while (pos < word.size()) {
    int best_id = -1;
    std::size_t best_len = 0;
    for (int id = 0; id < vocab.size(); ++id) {
      const std::string& token = vocab.token(id);
      std::string surface = token;
      if (pos > 0) {
        if (token.size() <= 2 || token.compare(0, 2, "##") != 0) continue;
        surface = token.substr(2);
      } else if (token.size() > 2 && token.compare(0, 2, "##") == 0) {
        continue;
      }
      if (surface.empty() || surface.size() > word.size() - pos) continue;
      if (word.compare(pos, surface.size(), surface) != 0) continue;
      if (surface.size() > best_len) {
        best_len = surface.size();
        best_id = id;
      }
    }
    if (best_id < 0) return {bistil::kUnkId};
    pieces.push_back(best_id);
    pos += best_len;
  }
  return pieces;
}

inline std::vector<int> tokenize_oracle(const std::string& text,
                                        const bistil::Vocabulary& vocab) {
  std::vector<int> out;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    auto pieces = longest_match_word(word, vocab);
    out.insert(out.end(), pieces.begin(), pieces.end());
    word.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      flush();
    } else {
      word.push_back(c);
    }
  }
  flush();
  return out;
}

// Recount of unigram probabilities straight from oracle tokenization.
inline std::vector<double> unigram_probs_oracle(const std::vector<std::string>& corpus,
                                                const bistil::Vocabulary& vocab) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(vocab.size()), 0);
  std::int64_t total = 0;
  for (const auto& line : corpus) {
    for (int id : tokenize_oracle(line, vocab)) {
      counts[static_cast<std::size_t>(id)] += 1;
      total += 1;
    }
  }
  std::vector<double> probs(counts.size(), 0.0);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    probs[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return probs;
}

// Set-filter form of vocabulary reduction.
inline std::set<int> reduction_oracle(const std::vector<double>& p_src,
                                      const std::vector<double>& p_tgt,
                                      double threshold) {
  std::set<int> kept;
  for (int i = 0; i < bistil::kNumSpecialTokens; ++i) kept.insert(i);
  for (std::size_t i = 0; i < p_src.size(); ++i) {
    if (p_src[i] >= threshold || p_tgt[i] >= threshold) {
      kept.insert(static_cast<int>(i));
    }
  }
  return kept;
}

}  // namespace oracles

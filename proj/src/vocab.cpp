// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>

namespace bistil {

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

}  // namespace

const std::vector<std::string>& Vocabulary::special_tokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]",
                                                    "[SEP]", "[MASK]"};
  return specials;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& specials = special_tokens();
  if (tokens_.size() < specials.size()) {
    throw DataError("vocabulary: fewer tokens than the special set");
  }
  for (std::size_t i = 0; i < specials.size(); ++i) {
    if (tokens_[i] != specials[i]) {
      throw DataError("vocabulary: token " + std::to_string(i) + " must be " +
                      specials[i] + ", got '" + tokens_[i] + "'");
    }
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw DataError("vocabulary: empty token at id " + std::to_string(i));
    }
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) {
      throw DataError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
    max_token_length_ = std::max(max_token_length_, static_cast<int>(tokens_[i].size()));
  }
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return id_of(token) >= 0; }

int VocabMap::map_or_unk(int old_id) const {
  auto it = old_to_new.find(old_id);
  return it == old_to_new.end() ? kUnkId : it->second;
}

Vocabulary build_vocabulary(const std::vector<std::string>& corpus, int max_size) {
  std::map<std::string, std::int64_t> word_counts;
  std::set<char> initial_chars;
  std::set<char> continuation_chars;
  for (const auto& line : corpus) {
    for (auto& word : split_words(line)) {
      word_counts[word] += 1;
      initial_chars.insert(word[0]);
      for (std::size_t i = 1; i < word.size(); ++i) continuation_chars.insert(word[i]);
    }
  }
  if (word_counts.empty()) {
    throw DomainError("build_vocabulary: corpus holds no words");
  }

  std::vector<std::string> tokens = Vocabulary::special_tokens();
  std::set<std::string> present(tokens.begin(), tokens.end());
  auto push_unique = [&](const std::string& t) {
    if (present.insert(t).second) tokens.push_back(t);
  };
  for (char c : initial_chars) push_unique(std::string(1, c));
  for (char c : continuation_chars) push_unique(std::string("##") + c);

  if (static_cast<int>(tokens.size()) > max_size) {
    throw ConfigError("build_vocabulary: max_size " + std::to_string(max_size) +
                      " below the " + std::to_string(tokens.size()) +
                      " special and character tokens");
  }

  std::vector<std::pair<std::string, std::int64_t>> ranked(word_counts.begin(),
                                                           word_counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (const auto& [word, count] : ranked) {
    (void)count;
    if (static_cast<int>(tokens.size()) >= max_size) break;
    push_unique(word);
  }
  return Vocabulary(std::move(tokens));
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> out;
  const int max_len = vocab.max_token_length();
  for (const auto& word : split_words(text)) {
    std::vector<int> pieces;
    std::size_t pos = 0;
    bool failed = false;
    while (pos < word.size()) {
      const bool continuation = pos > 0;
      const int budget = continuation ? std::max(1, max_len - 2) : max_len;
      std::size_t trial =
          std::min<std::size_t>(word.size() - pos, static_cast<std::size_t>(budget));
      int found = -1;
      for (; trial >= 1; --trial) {
        std::string piece = word.substr(pos, trial);
        if (continuation) piece = "##" + piece;
        const int id = vocab.id_of(piece);
        if (id >= 0) {
          found = id;
          pos += trial;
          break;
        }
        if (trial == 1) break;
      }
      if (found < 0) {
        failed = true;
        break;
      }
      pieces.push_back(found);
    }
    if (failed) {
      out.push_back(kUnkId);
    } else {
      out.insert(out.end(), pieces.begin(), pieces.end());
    }
  }
  return out;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string text;
  for (int id : ids) {
    const std::string& token = vocab.token(id);
    if (token.size() > 2 && token.compare(0, 2, "##") == 0) {
      text.append(token, 2, std::string::npos);
    } else {
      if (!text.empty()) text.push_back(' ');
      text.append(token);
    }
  }
  return text;
}

std::vector<double> unigram_probs(const std::vector<std::string>& corpus,
                                  const Vocabulary& vocab) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(vocab.size()), 0);
  std::int64_t total = 0;
  for (const auto& line : corpus) {
    for (int id : tokenize(line, vocab)) {
      counts[static_cast<std::size_t>(id)] += 1;
      total += 1;
    }
  }
  if (total == 0) {
    throw DomainError("unigram_probs: corpus produced no tokens");
  }
  std::vector<double> probs(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    probs[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  }
  return probs;
}

VocabMap reduce_vocabulary(const std::vector<double>& p_src,
                           const std::vector<double>& p_tgt, double threshold) {
  if (p_src.size() != p_tgt.size()) {
    throw DimensionError("reduce_vocabulary: probability vectors differ in length (" +
                         std::to_string(p_src.size()) + " vs " +
                         std::to_string(p_tgt.size()) + ")");
  }
  if (p_src.size() < static_cast<std::size_t>(kNumSpecialTokens)) {
    throw DimensionError("reduce_vocabulary: vectors shorter than the special set");
  }
  VocabMap map;
  map.old_size = static_cast<int>(p_src.size());
  for (int i = 0; i < map.old_size; ++i) {
    const bool special = i < kNumSpecialTokens;
    if (special || p_src[static_cast<std::size_t>(i)] >= threshold ||
        p_tgt[static_cast<std::size_t>(i)] >= threshold) {
      map.old_to_new[i] = static_cast<int>(map.kept.size());
      map.kept.push_back(i);
    }
  }
  return map;
}

VocabMap identity_vocab_map(int vocab_size) {
  if (vocab_size < kNumSpecialTokens) {
    throw ContractError("identity_vocab_map: size below the special set");
  }
  VocabMap map;
  map.old_size = vocab_size;
  map.kept.resize(static_cast<std::size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) {
    map.kept[static_cast<std::size_t>(i)] = i;
    map.old_to_new[i] = i;
  }
  return map;
}

Vocabulary apply_vocab_map(const Vocabulary& vocab, const VocabMap& map) {
  if (map.old_size != vocab.size()) {
    throw ContractError("apply_vocab_map: map built over vocabulary of size " +
                        std::to_string(map.old_size) + ", got " +
                        std::to_string(vocab.size()));
  }
  std::vector<std::string> tokens;
  tokens.reserve(map.kept.size());
  for (int old_id : map.kept) tokens.push_back(vocab.token(old_id));
  return Vocabulary(std::move(tokens));
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  for (const auto& token : vocab.tokens()) out << token << '\n';
  if (!out) throw IoError("short write to vocabulary file " + path);
}

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      throw ParseError("vocabulary file " + path + " line " +
                       std::to_string(tokens.size() + 1) + " is empty");
    }
    tokens.push_back(line);
  }
  try {
    return Vocabulary(std::move(tokens));
  } catch (const DataError& e) {
    throw ParseError("vocabulary file " + path + ": " + e.what());
  }
}

void save_unigram_probs(const Vocabulary& vocab, const std::vector<double>& probs,
                        const std::string& path) {
  if (static_cast<int>(probs.size()) != vocab.size()) {
    throw DimensionError("save_unigram_probs: vector length mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write probability file " + path);
  std::ostringstream line;
  for (int i = 0; i < vocab.size(); ++i) {
    line.str("");
    line.precision(17);
    line << vocab.token(i) << '\t' << probs[static_cast<std::size_t>(i)] << '\n';
    out << line.str();
  }
  if (!out) throw IoError("short write to probability file " + path);
}

}  // namespace bistil

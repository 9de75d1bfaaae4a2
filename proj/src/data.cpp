// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "bistil/errors.hpp"
#include "bistil/tensor.hpp"
#include "json.hpp"

namespace bistil {
namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string word;
  while (in >> word) words.push_back(word);
  return words;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t begin = 0;
  for (;;) {
    const auto tab = line.find('\t', begin);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(begin));
      return fields;
    }
    fields.push_back(line.substr(begin, tab - begin));
    begin = tab + 1;
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

int resolve_label(const std::string& label, const std::vector<std::string>& vocab) {
  const auto it = std::find(vocab.begin(), vocab.end(), label);
  if (it == vocab.end()) {
    throw DataError("label '" + label + "' outside the label vocabulary");
  }
  return static_cast<int>(it - vocab.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Batches and MLM masking.

MaskedBatch mlm_mask(const Batch& batch, double rate, Rng& rng) {
  if (!(rate > 0.0) || !(rate < 1.0)) {
    throw ConfigError("mask rate must lie in (0, 1), got " + std::to_string(rate));
  }
  if (batch.vocab_size <= kNumSpecialTokens) {
    throw ConfigError("batch vocab_size leaves no maskable tokens");
  }
  if (batch.input_ids.size() != batch.attention_mask.size()) {
    throw ContractError("input_ids and attention_mask row counts differ");
  }

  MaskedBatch out;
  out.input_ids = batch.input_ids;
  out.attention_mask = batch.attention_mask;
  out.mlm_labels.resize(batch.input_ids.size());
  for (std::size_t r = 0; r < out.input_ids.size(); ++r) {
    auto& ids = out.input_ids[r];
    const auto& attention = out.attention_mask[r];
    if (ids.size() != attention.size()) {
      throw ContractError("ragged row " + std::to_string(r) + " in batch");
    }
    auto& labels = out.mlm_labels[r];
    labels.assign(ids.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (attention[i] == 0 || ids[i] < kNumSpecialTokens) continue;
      if (rng.uniform() >= rate) continue;
      labels[i] = ids[i];
      const double u = rng.uniform();
      if (u < 0.8) {
        ids[i] = kMaskId;
      } else if (u < 0.9) {
        ids[i] = static_cast<int>(
            rng.uniform_int(kNumSpecialTokens, batch.vocab_size));
      }
    }
  }
  return out;
}

std::vector<int> encode_line(const std::string& line, const Vocabulary& vocab,
                             int max_seq_len) {
  if (max_seq_len < 2) throw ContractError("max_seq_len must be at least 2");
  std::vector<int> ids;
  ids.push_back(kClsId);
  for (int id : tokenize(line, vocab)) ids.push_back(id);
  if (static_cast<int>(ids.size()) > max_seq_len - 1) {
    ids.resize(static_cast<std::size_t>(max_seq_len - 1));
  }
  ids.push_back(kSepId);
  return ids;
}

std::vector<int> encode_pair(const std::string& first, const std::string& second,
                             const Vocabulary& vocab, int max_seq_len) {
  if (max_seq_len < 3) throw ContractError("max_seq_len must be at least 3");
  std::vector<int> ids;
  ids.push_back(kClsId);
  for (int id : tokenize(first, vocab)) ids.push_back(id);
  ids.push_back(kSepId);
  for (int id : tokenize(second, vocab)) ids.push_back(id);
  if (static_cast<int>(ids.size()) > max_seq_len - 1) {
    ids.resize(static_cast<std::size_t>(max_seq_len - 1));
  }
  ids.push_back(kSepId);
  return ids;
}

Batch make_batch(const std::vector<std::string>& lines, const Vocabulary& vocab,
                 int max_seq_len) {
  Batch batch;
  batch.vocab_size = vocab.size();
  std::size_t longest = 0;
  for (const auto& line : lines) {
    batch.input_ids.push_back(encode_line(line, vocab, max_seq_len));
    longest = std::max(longest, batch.input_ids.back().size());
  }
  for (auto& ids : batch.input_ids) {
    std::vector<int> attention(ids.size(), 1);
    ids.resize(longest, kPadId);
    attention.resize(longest, 0);
    batch.attention_mask.push_back(std::move(attention));
  }
  return batch;
}

std::vector<int> shuffle_indices(int n, Rng& rng) {
  std::vector<int> indices(static_cast<std::size_t>(std::max(n, 0)));
  std::iota(indices.begin(), indices.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, i + 1));
    std::swap(indices[static_cast<std::size_t>(i)], indices[j]);
  }
  return indices;
}

// ---------------------------------------------------------------------------
// Task datasets.

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::token_classification: return "token_classification";
    case TaskKind::sequence_pair_classification: return "sequence_pair_classification";
    case TaskKind::span_extraction: return "span_extraction";
  }
  throw ContractError("unknown task kind");
}

TaskKind task_kind_from_name(const std::string& name) {
  for (TaskKind kind : {TaskKind::token_classification,
                        TaskKind::sequence_pair_classification,
                        TaskKind::span_extraction}) {
    if (task_kind_name(kind) == name) return kind;
  }
  throw ConfigError("unknown task kind '" + name + "'");
}

namespace {

TaskDataset load_token_task(const std::vector<std::string>& lines,
                            const std::vector<std::string>* label_vocab) {
  TaskDataset dataset;
  dataset.kind = TaskKind::token_classification;

  std::vector<std::vector<std::string>> sentence_tokens;
  std::vector<std::vector<std::string>> sentence_labels;
  std::vector<std::string> tokens;
  std::vector<std::string> labels;
  std::set<std::string> seen;

  auto flush = [&] {
    if (tokens.empty()) return;
    sentence_tokens.push_back(std::move(tokens));
    sentence_labels.push_back(std::move(labels));
    tokens.clear();
    labels.clear();
  };
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto& line = lines[n];
    if (line.empty()) {
      flush();
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      throw ParseError("expected token<TAB>label at line " + std::to_string(n + 1));
    }
    tokens.push_back(fields[0]);
    labels.push_back(fields[1]);
    seen.insert(fields[1]);
  }
  flush();

  dataset.label_vocab = label_vocab
                            ? *label_vocab
                            : std::vector<std::string>(seen.begin(), seen.end());
  for (std::size_t s = 0; s < sentence_tokens.size(); ++s) {
    TaskExample example;
    example.tokens = std::move(sentence_tokens[s]);
    for (const auto& label : sentence_labels[s]) {
      example.token_labels.push_back(resolve_label(label, dataset.label_vocab));
    }
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

TaskDataset load_pair_task(const std::vector<std::string>& lines,
                           const std::vector<std::string>* label_vocab) {
  TaskDataset dataset;
  dataset.kind = TaskKind::sequence_pair_classification;

  std::vector<std::array<std::string, 3>> rows;
  std::set<std::string> seen;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    const auto fields = split_tabs(lines[n]);
    if (fields.size() != 3 || fields[2].empty()) {
      throw ParseError("expected premise<TAB>hypothesis<TAB>label at line " +
                       std::to_string(n + 1));
    }
    rows.push_back({fields[0], fields[1], fields[2]});
    seen.insert(fields[2]);
  }
  dataset.label_vocab = label_vocab
                            ? *label_vocab
                            : std::vector<std::string>(seen.begin(), seen.end());
  for (const auto& row : rows) {
    TaskExample example;
    example.premise = row[0];
    example.hypothesis = row[1];
    example.label = resolve_label(row[2], dataset.label_vocab);
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

TaskDataset load_span_task(const std::vector<std::string>& lines) {
  TaskDataset dataset;
  dataset.kind = TaskKind::span_extraction;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(lines[n]);
    } catch (const nlohmann::json::parse_error&) {
      throw ParseError("bad JSON at line " + std::to_string(n + 1));
    }
    if (!row.is_object() || !row.contains("context") || !row.contains("question") ||
        !row.contains("answer_start") || !row.contains("answer_text") ||
        !row["context"].is_string() || !row["question"].is_string() ||
        !row["answer_text"].is_string() || !row["answer_start"].is_number_integer()) {
      throw ParseError("missing or mistyped span fields at line " + std::to_string(n + 1));
    }
    TaskExample example;
    example.context = row["context"].get<std::string>();
    example.question = row["question"].get<std::string>();
    example.answer_text = row["answer_text"].get<std::string>();
    example.answer_start = row["answer_start"].get<int>();
    if (example.answer_start < 0 ||
        example.answer_start + example.answer_text.size() > example.context.size() ||
        example.context.substr(static_cast<std::size_t>(example.answer_start),
                               example.answer_text.size()) != example.answer_text) {
      throw DataError("answer_text does not match the context slice at line " +
                      std::to_string(n + 1));
    }
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

}  // namespace

TaskDataset load_task_dataset(const std::string& path, TaskKind kind,
                              const std::vector<std::string>* label_vocab) {
  const auto lines = read_lines(path);
  switch (kind) {
    case TaskKind::token_classification: return load_token_task(lines, label_vocab);
    case TaskKind::sequence_pair_classification: return load_pair_task(lines, label_vocab);
    case TaskKind::span_extraction: return load_span_task(lines);
  }
  throw ContractError("unknown task kind");
}

void save_task_dataset(const TaskDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  switch (dataset.kind) {
    case TaskKind::token_classification: {
      bool first = true;
      for (const auto& example : dataset.examples) {
        if (!first) out << "\n";
        first = false;
        for (std::size_t i = 0; i < example.tokens.size(); ++i) {
          out << example.tokens[i] << "\t"
              << dataset.label_vocab.at(static_cast<std::size_t>(example.token_labels.at(i)))
              << "\n";
        }
      }
      break;
    }
    case TaskKind::sequence_pair_classification: {
      for (const auto& example : dataset.examples) {
        out << example.premise << "\t" << example.hypothesis << "\t"
            << dataset.label_vocab.at(static_cast<std::size_t>(example.label)) << "\n";
      }
      break;
    }
    case TaskKind::span_extraction: {
      for (const auto& example : dataset.examples) {
        nlohmann::json row;
        row["context"] = example.context;
        row["question"] = example.question;
        row["answer_start"] = example.answer_start;
        row["answer_text"] = example.answer_text;
        out << row.dump() << "\n";
      }
      break;
    }
  }
  if (!out) throw IoError("short write to " + path);
}

EncodedExample encode_example(const TaskExample& example, TaskKind kind,
                              const Vocabulary& vocab, int max_seq_len) {
  EncodedExample encoded;
  switch (kind) {
    case TaskKind::token_classification: {
      if (example.tokens.size() != example.token_labels.size()) {
        throw ContractError("tokens and token_labels length mismatch");
      }
      encoded.input_ids.push_back(kClsId);
      encoded.token_labels.push_back(kIgnoreLabel);
      for (std::size_t w = 0; w < example.tokens.size(); ++w) {
        const auto pieces = tokenize(example.tokens[w], vocab);
        for (std::size_t p = 0; p < pieces.size(); ++p) {
          if (static_cast<int>(encoded.input_ids.size()) >= max_seq_len - 1) break;
          encoded.input_ids.push_back(pieces[p]);
          encoded.token_labels.push_back(p == 0 ? example.token_labels[w]
                                                : kIgnoreLabel);
        }
      }
      encoded.input_ids.push_back(kSepId);
      encoded.token_labels.push_back(kIgnoreLabel);
      break;
    }
    case TaskKind::sequence_pair_classification: {
      encoded.input_ids =
          encode_pair(example.premise, example.hypothesis, vocab, max_seq_len);
      encoded.label = example.label;
      break;
    }
    case TaskKind::span_extraction: {
      encoded.input_ids.push_back(kClsId);
      for (int id : tokenize(example.question, vocab)) {
        encoded.input_ids.push_back(id);
      }
      encoded.input_ids.push_back(kSepId);

      const auto words = split_words(example.context);
      // Character offset of each word in the canonical single-space join.
      std::size_t offset = 0;
      int answer_word = -1;
      std::size_t answer_words = split_words(example.answer_text).size();
      std::vector<std::pair<int, int>> word_token_range(words.size(), {-1, -1});
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (static_cast<int>(offset) == example.answer_start) answer_word = static_cast<int>(w);
        offset += words[w].size() + 1;
        const auto pieces = tokenize(words[w], vocab);
        for (const int id : pieces) {
          if (static_cast<int>(encoded.input_ids.size()) >= max_seq_len - 1) break;
          if (word_token_range[w].first < 0) {
            word_token_range[w].first = static_cast<int>(encoded.input_ids.size());
          }
          word_token_range[w].second = static_cast<int>(encoded.input_ids.size());
          encoded.input_ids.push_back(id);
        }
      }
      encoded.input_ids.push_back(kSepId);

      if (answer_word >= 0 && answer_words > 0 &&
          static_cast<std::size_t>(answer_word) + answer_words <= words.size()) {
        const auto& first = word_token_range[static_cast<std::size_t>(answer_word)];
        const auto& last =
            word_token_range[static_cast<std::size_t>(answer_word) + answer_words - 1];
        if (first.first >= 0 && last.second >= 0) {
          encoded.span_start = first.first;
          encoded.span_end = last.second;
        }
      }
      break;
    }
  }
  encoded.attention_mask.assign(encoded.input_ids.size(), 1);
  return encoded;
}

// ---------------------------------------------------------------------------
// Synthetic bilingual corpus.

namespace {

constexpr int kSynthTopics = 4;
constexpr int kMinLexicon = 24;

std::string make_word(Rng& rng) {
  static constexpr char consonants[] = "bdfgklmnprstvz";
  static constexpr char vowels[] = "aeiou";
  const auto syllables = 2 + rng.uniform_int(0, 3);
  std::string word;
  for (std::int64_t s = 0; s < syllables; ++s) {
    word += consonants[rng.uniform_int(0, 14)];
    word += vowels[rng.uniform_int(0, 5)];
  }
  return word;
}

std::string unique_word(Rng& rng, std::set<std::string>& used) {
  for (;;) {
    std::string word = make_word(rng);
    if (used.insert(word).second) return word;
  }
}

std::vector<double> zipf_weights(std::size_t n) {
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) weights[i] = 1.0 / static_cast<double>(i + 1);
  return weights;
}

int pick(const std::vector<int>& bucket, const std::vector<double>& weights, Rng& rng) {
  return bucket[rng.weighted_choice(
      std::span<const double>(weights.data(), bucket.size()))];
}

}  // namespace

std::string SynthCorpus::render(const SynthLine& line, Language lang) const {
  std::string text;
  for (std::size_t w = 0; w < line.word_ids.size(); ++w) {
    if (w > 0) text += ' ';
    const auto& word = lexicon[static_cast<std::size_t>(line.word_ids[w])];
    text += lang == Language::source ? word.src : word.tgt;
  }
  return text;
}

SynthCorpus synth_bilingual_corpus(std::uint64_t seed, int vocab_size, int lines,
                                   double overlap) {
  overlap = std::clamp(overlap, 0.0, 1.0);
  const int total = std::max(vocab_size, kMinLexicon);

  SynthCorpus corpus;
  corpus.num_topics = kSynthTopics;
  Rng root(seed);

  // Latent layout: function words first, then per topic a query word,
  // common words and entity words.
  const int n_function = std::max(4, total / 10);
  const int n_content = total - n_function - kSynthTopics;
  std::vector<int> function_ids;
  std::vector<int> query_ids(kSynthTopics, -1);
  std::vector<std::vector<int>> common_ids(kSynthTopics);
  std::vector<std::vector<int>> entity_ids(kSynthTopics);

  corpus.lexicon.resize(static_cast<std::size_t>(total));
  int next = 0;
  for (int f = 0; f < n_function; ++f) {
    corpus.lexicon[static_cast<std::size_t>(next)].kind = SynthWord::Kind::function_word;
    function_ids.push_back(next++);
  }
  for (int t = 0; t < kSynthTopics; ++t) {
    const int share = n_content / kSynthTopics + (t < n_content % kSynthTopics ? 1 : 0);
    const int n_entity = std::max(1, share * 3 / 10);
    auto& query = corpus.lexicon[static_cast<std::size_t>(next)];
    query.kind = SynthWord::Kind::query;
    query.topic = t;
    query_ids[static_cast<std::size_t>(t)] = next++;
    for (int w = 0; w < share - n_entity; ++w) {
      auto& word = corpus.lexicon[static_cast<std::size_t>(next)];
      word.kind = SynthWord::Kind::common;
      word.topic = t;
      common_ids[static_cast<std::size_t>(t)].push_back(next++);
    }
    for (int w = 0; w < n_entity; ++w) {
      auto& word = corpus.lexicon[static_cast<std::size_t>(next)];
      word.kind = SynthWord::Kind::entity;
      word.topic = t;
      entity_ids[static_cast<std::size_t>(t)].push_back(next++);
    }
  }

  // Surface forms. Shared lexemes reuse the source form in the target
  // language; all other forms are globally distinct.
  Rng shuffle_rng = root.fork(0);
  Rng surface_rng = root.fork(1);
  const auto order = shuffle_indices(next, shuffle_rng);
  const auto n_shared =
      static_cast<std::size_t>(std::llround(overlap * static_cast<double>(next)));
  std::vector<bool> shared(static_cast<std::size_t>(next), false);
  for (std::size_t i = 0; i < n_shared; ++i) {
    shared[static_cast<std::size_t>(order[i])] = true;
  }
  std::set<std::string> used;
  for (int w = 0; w < next; ++w) {
    auto& word = corpus.lexicon[static_cast<std::size_t>(w)];
    word.src = unique_word(surface_rng, used);
    word.tgt = shared[static_cast<std::size_t>(w)] ? word.src
                                                   : unique_word(surface_rng, used);
  }

  // Latent line stream: mostly topic words, some function words, and
  // occasional entity runs of the line's topic.
  Rng line_rng = root.fork(2);
  const auto function_weights = zipf_weights(function_ids.size());
  std::vector<std::vector<double>> common_weights;
  std::vector<std::vector<double>> entity_weights;
  for (int t = 0; t < kSynthTopics; ++t) {
    common_weights.push_back(zipf_weights(common_ids[static_cast<std::size_t>(t)].size()));
    entity_weights.push_back(zipf_weights(entity_ids[static_cast<std::size_t>(t)].size()));
  }

  for (int n = 0; n < lines; ++n) {
    SynthLine line;
    line.topic = static_cast<int>(line_rng.uniform_int(0, kSynthTopics));
    const auto st = static_cast<std::size_t>(line.topic);
    const auto n_words = 12 + line_rng.uniform_int(0, 9);
    while (static_cast<std::int64_t>(line.word_ids.size()) < n_words) {
      const double u = line_rng.uniform();
      if (u < 0.20) {
        line.word_ids.push_back(pick(function_ids, function_weights, line_rng));
        line.bio.push_back("O");
      } else if (u < 0.23) {
        // Query words show up as rare fillers with a topic independent of
        // the line's, so their subwords survive vocabulary reduction
        // without leaking the line label.
        line.word_ids.push_back(
            query_ids[static_cast<std::size_t>(line_rng.uniform_int(0, kSynthTopics))]);
        line.bio.push_back("O");
      } else if (u < 0.38) {
        const auto run = 1 + line_rng.uniform_int(0, 3);
        const std::string tag = "T" + std::to_string(line.topic);
        for (std::int64_t r = 0; r < run; ++r) {
          if (static_cast<std::int64_t>(line.word_ids.size()) >= n_words) break;
          line.word_ids.push_back(pick(entity_ids[st], entity_weights[st], line_rng));
          line.bio.push_back((r == 0 ? "B-" : "I-") + tag);
        }
      } else {
        line.word_ids.push_back(pick(common_ids[st], common_weights[st], line_rng));
        line.bio.push_back("O");
      }
    }
    corpus.src_lines.push_back(corpus.render(line, Language::source));
    corpus.tgt_lines.push_back(corpus.render(line, Language::target));
    corpus.lines.push_back(std::move(line));
  }
  return corpus;
}

namespace {

std::vector<std::string> synth_bio_vocab(int topics) {
  std::vector<std::string> vocab;
  for (int t = 0; t < topics; ++t) vocab.push_back("B-T" + std::to_string(t));
  for (int t = 0; t < topics; ++t) vocab.push_back("I-T" + std::to_string(t));
  vocab.push_back("O");
  std::sort(vocab.begin(), vocab.end());
  return vocab;
}

const SynthWord& query_word(const SynthCorpus& corpus, int topic) {
  for (const auto& word : corpus.lexicon) {
    if (word.kind == SynthWord::Kind::query && word.topic == topic) return word;
  }
  throw ContractError("corpus has no query word for topic " + std::to_string(topic));
}

}  // namespace

TaskDataset derive_token_task(const SynthCorpus& corpus, Language lang, int count) {
  TaskDataset dataset;
  dataset.kind = TaskKind::token_classification;
  dataset.label_vocab = synth_bio_vocab(corpus.num_topics);
  const auto limit = count > 0 ? std::min<std::size_t>(static_cast<std::size_t>(count),
                                                       corpus.lines.size())
                               : corpus.lines.size();
  for (std::size_t n = 0; n < limit; ++n) {
    const auto& line = corpus.lines[n];
    TaskExample example;
    for (std::size_t w = 0; w < line.word_ids.size(); ++w) {
      const auto& word = corpus.lexicon[static_cast<std::size_t>(line.word_ids[w])];
      example.tokens.push_back(lang == Language::source ? word.src : word.tgt);
      example.token_labels.push_back(resolve_label(line.bio[w], dataset.label_vocab));
    }
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

TaskDataset derive_pair_task(const SynthCorpus& corpus, Language lang, int count,
                             std::uint64_t seed) {
  TaskDataset dataset;
  dataset.kind = TaskKind::sequence_pair_classification;
  dataset.label_vocab = {"different", "same"};

  std::vector<std::vector<int>> by_topic(static_cast<std::size_t>(corpus.num_topics));
  for (std::size_t n = 0; n < corpus.lines.size(); ++n) {
    by_topic[static_cast<std::size_t>(corpus.lines[n].topic)].push_back(
        static_cast<int>(n));
  }
  int populated = 0;
  for (const auto& bucket : by_topic) populated += bucket.empty() ? 0 : 1;
  if (populated < 2) {
    throw DomainError("pair task needs lines from at least two topics");
  }

  Rng rng(seed);
  for (int e = 0; e < count; ++e) {
    const bool same = e % 2 == 0;
    const auto first =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.lines.size())));
    const int topic = corpus.lines[first].topic;
    std::size_t second;
    if (same) {
      const auto& bucket = by_topic[static_cast<std::size_t>(topic)];
      second = static_cast<std::size_t>(
          bucket[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(bucket.size())))]);
    } else {
      for (;;) {
        const auto candidate = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(corpus.lines.size())));
        if (corpus.lines[candidate].topic != topic) {
          second = candidate;
          break;
        }
      }
    }
    TaskExample example;
    example.premise = corpus.render(corpus.lines[first], lang);
    example.hypothesis = corpus.render(corpus.lines[second], lang);
    example.label = same ? 1 : 0;
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

TaskDataset derive_span_task(const SynthCorpus& corpus, Language lang, int count) {
  TaskDataset dataset;
  dataset.kind = TaskKind::span_extraction;
  for (const auto& line : corpus.lines) {
    if (count > 0 && static_cast<int>(dataset.examples.size()) >= count) break;
    // Entity runs: maximal B-I... stretches. The question names the line's
    // topic, so only lines with exactly one run are unambiguous.
    int runs = 0;
    int run_begin = -1;
    int run_end = -1;
    for (std::size_t w = 0; w < line.bio.size(); ++w) {
      if (line.bio[w].rfind("B-", 0) == 0) {
        ++runs;
        run_begin = static_cast<int>(w);
        run_end = static_cast<int>(w);
      } else if (line.bio[w].rfind("I-", 0) == 0 && run_end == static_cast<int>(w) - 1) {
        run_end = static_cast<int>(w);
      }
    }
    if (runs != 1) continue;

    TaskExample example;
    example.context = corpus.render(line, lang);
    const auto& query = query_word(corpus, line.topic);
    example.question = lang == Language::source ? query.src : query.tgt;

    std::size_t offset = 0;
    for (int w = 0; w < run_begin; ++w) {
      const auto& word = corpus.lexicon[static_cast<std::size_t>(line.word_ids[static_cast<std::size_t>(w)])];
      offset += (lang == Language::source ? word.src : word.tgt).size() + 1;
    }
    std::string answer;
    for (int w = run_begin; w <= run_end; ++w) {
      if (w > run_begin) answer += ' ';
      const auto& word = corpus.lexicon[static_cast<std::size_t>(line.word_ids[static_cast<std::size_t>(w)])];
      answer += lang == Language::source ? word.src : word.tgt;
    }
    example.answer_start = static_cast<int>(offset);
    example.answer_text = std::move(answer);
    dataset.examples.push_back(std::move(example));
  }
  return dataset;
}

}  // namespace bistil

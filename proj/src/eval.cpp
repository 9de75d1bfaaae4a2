// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "bistil/errors.hpp"
#include "bistil/tensor.hpp"
#include "bistil/vocab.hpp"

namespace bistil {

namespace {

std::vector<std::string> split_ws(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string word;
  while (in >> word) words.push_back(word);
  return words;
}

struct F1Counts {
  std::int64_t tp = 0;
  std::int64_t predicted = 0;
  std::int64_t gold = 0;

  double precision() const { return predicted > 0 ? static_cast<double>(tp) / predicted : 0.0; }
  double recall() const { return gold > 0 ? static_cast<double>(tp) / gold : 0.0; }
  double f1_percent() const {
    if (predicted == 0 && gold == 0) return 100.0;
    const double p = precision();
    const double r = recall();
    return p + r > 0.0 ? 200.0 * p * r / (p + r) : 0.0;
  }
};

int argmax_row(std::span<const float> data, int row, int width) {
  int best = 0;
  float best_value = data[static_cast<std::size_t>(row) * width];
  for (int c = 1; c < width; ++c) {
    const float v = data[static_cast<std::size_t>(row) * width + c];
    if (v > best_value) {
      best_value = v;
      best = c;
    }
  }
  return best;
}

// Per-example prediction records, aggregated after all workers join so the
// report never depends on the thread count.
struct ExampleRecord {
  std::vector<std::string> gold_labels;
  std::vector<std::string> pred_labels;
  int gold_label = -1;
  int pred_label = -1;
  bool exact_match = false;
  double token_f1 = 0.0;
};

void run_over_examples(int count, int max_threads,
                       const std::function<void(int)>& work) {
  const int threads = std::clamp(max_threads, 1, count);
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) work(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      NoGradGuard guard;
      for (int i = t; i < count; i += threads) work(i);
    });
  }
  for (auto& thread : pool) thread.join();
}

}  // namespace

std::vector<EntitySpan> decode_bio(const std::vector<std::string>& labels,
                                   int sentence) {
  std::vector<EntitySpan> spans;
  int start = -1;
  std::string type;
  const auto flush = [&](int end) {
    if (start >= 0) spans.push_back({sentence, start, end, type});
    start = -1;
    type.clear();
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string& label = labels[i];
    if (label.size() > 2 && label[1] == '-' && (label[0] == 'B' || label[0] == 'I')) {
      const std::string tag = label.substr(2);
      if (label[0] == 'B' || start < 0 || tag != type) {
        flush(static_cast<int>(i) - 1);
        start = static_cast<int>(i);
        type = tag;
      }
    } else {
      flush(static_cast<int>(i) - 1);
    }
  }
  flush(static_cast<int>(labels.size()) - 1);
  return spans;
}

double token_overlap_f1(const std::string& prediction, const std::string& gold) {
  const auto pred_words = split_ws(prediction);
  const auto gold_words = split_ws(gold);
  if (pred_words.empty() && gold_words.empty()) return 100.0;
  std::map<std::string, int> remaining;
  for (const auto& w : gold_words) ++remaining[w];
  std::int64_t tp = 0;
  for (const auto& w : pred_words) {
    auto it = remaining.find(w);
    if (it != remaining.end() && it->second > 0) {
      --it->second;
      ++tp;
    }
  }
  F1Counts counts;
  counts.tp = tp;
  counts.predicted = static_cast<std::int64_t>(pred_words.size());
  counts.gold = static_cast<std::int64_t>(gold_words.size());
  return counts.f1_percent();
}

EvalReport score_token_labels(const std::vector<std::vector<std::string>>& gold,
                              const std::vector<std::vector<std::string>>& predicted) {
  if (gold.size() != predicted.size()) {
    throw ContractError("gold and predicted sentence counts differ");
  }
  EvalReport report;
  report.metric = "f1";
  report.example_count = static_cast<int>(gold.size());
  F1Counts total;
  std::map<std::string, F1Counts> by_type;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    const auto gold_spans = decode_bio(gold[s], static_cast<int>(s));
    const auto pred_spans = decode_bio(predicted[s], static_cast<int>(s));
    const std::set<EntitySpan> gold_set(gold_spans.begin(), gold_spans.end());
    for (const auto& span : pred_spans) {
      ++total.predicted;
      ++by_type[span.type].predicted;
      if (gold_set.count(span) > 0) {
        ++total.tp;
        ++by_type[span.type].tp;
      }
    }
    for (const auto& span : gold_spans) {
      ++total.gold;
      ++by_type[span.type].gold;
    }
  }
  report.value = total.f1_percent();
  report.secondary["precision"] = 100.0 * total.precision();
  report.secondary["recall"] = 100.0 * total.recall();
  for (const auto& [type, counts] : by_type) {
    report.per_class[type] = counts.f1_percent();
  }
  return report;
}

EvalReport evaluate(const Model& model, const TaskDataset& dataset,
                    const Vocabulary& vocab, int max_threads) {
  const auto expect_head = [&]() -> HeadKind {
    switch (dataset.kind) {
      case TaskKind::token_classification:
        return HeadKind::token_classification;
      case TaskKind::sequence_pair_classification:
        return HeadKind::sequence_classification;
      case TaskKind::span_extraction:
        return HeadKind::span_extraction;
    }
    throw ContractError("unknown task kind");
  }();
  if (model.head.kind != expect_head) {
    throw ContractError(std::string("head kind ") + head_kind_name(model.head.kind) +
                        " cannot score a " + task_kind_name(dataset.kind) + " dataset");
  }
  if (model.config.vocab_size != vocab.size()) {
    throw ContractError("model vocab_size does not match the vocabulary");
  }
  if ((dataset.kind == TaskKind::token_classification ||
       dataset.kind == TaskKind::sequence_pair_classification) &&
      model.head.num_labels != static_cast<int>(dataset.label_vocab.size())) {
    throw ContractError("head labels " + std::to_string(model.head.num_labels) +
                        " vs dataset labels " +
                        std::to_string(dataset.label_vocab.size()));
  }

  const int count = static_cast<int>(dataset.examples.size());
  std::vector<ExampleRecord> records(static_cast<std::size_t>(count));

  const auto score_one = [&](int index) {
    const TaskExample& example = dataset.examples[static_cast<std::size_t>(index)];
    const EncodedExample enc =
        encode_example(example, dataset.kind, vocab, model.config.max_seq_len);
    NoGradGuard guard;
    const ActivationTrace trace = forward(model, enc.input_ids, enc.attention_mask);
    ExampleRecord& record = records[static_cast<std::size_t>(index)];

    switch (dataset.kind) {
      case TaskKind::token_classification: {
        const int width = model.head.num_labels;
        const auto logits = trace.logits.data();
        record.gold_labels.reserve(example.tokens.size());
        std::size_t position = 0;
        for (std::size_t w = 0; w < example.tokens.size(); ++w) {
          record.gold_labels.push_back(
              dataset.label_vocab[static_cast<std::size_t>(example.token_labels[w])]);
          // Advance to this word's first piece; words lost to truncation
          // predict O and show up as recall misses.
          while (position < enc.token_labels.size() &&
                 enc.token_labels[position] == kIgnoreLabel) {
            ++position;
          }
          if (position < enc.token_labels.size()) {
            record.pred_labels.push_back(dataset.label_vocab[static_cast<std::size_t>(
                argmax_row(logits, static_cast<int>(position), width))]);
            ++position;
          } else {
            record.pred_labels.push_back("O");
          }
        }
        break;
      }
      case TaskKind::sequence_pair_classification: {
        record.gold_label = enc.label;
        record.pred_label = argmax_row(trace.logits.data(), 0, model.head.num_labels);
        break;
      }
      case TaskKind::span_extraction: {
        const auto logits = trace.logits.data();
        const int len = static_cast<int>(enc.input_ids.size());
        int first_sep = -1;
        for (int i = 0; i < len; ++i) {
          if (enc.input_ids[static_cast<std::size_t>(i)] == kSepId) {
            first_sep = i;
            break;
          }
        }
        // Context sits between the question separator and the final one.
        const int lo = first_sep + 1;
        const int hi = len - 2;
        int best_start = -1;
        int best_end = -1;
        float best_score = 0.0f;
        for (int i = lo; i <= hi; ++i) {
          for (int j = i; j <= hi; ++j) {
            const float score = logits[static_cast<std::size_t>(i) * 2] +
                                logits[static_cast<std::size_t>(j) * 2 + 1];
            if (best_start < 0 || score > best_score) {
              best_score = score;
              best_start = i;
              best_end = j;
            }
          }
        }
        std::string prediction;
        if (best_start >= 0) {
          const std::vector<int> ids(
              enc.input_ids.begin() + best_start,
              enc.input_ids.begin() + best_end + 1);
          prediction = detokenize(ids, vocab);
        }
        const std::string gold = [&] {
          const auto words = split_ws(example.answer_text);
          std::string joined;
          for (const auto& w : words) {
            if (!joined.empty()) joined += ' ';
            joined += w;
          }
          return joined;
        }();
        record.exact_match = prediction == gold;
        record.token_f1 = token_overlap_f1(prediction, gold);
        break;
      }
    }
  };

  run_over_examples(count, max_threads, score_one);

  EvalReport report;
  report.example_count = count;
  switch (dataset.kind) {
    case TaskKind::token_classification: {
      std::vector<std::vector<std::string>> gold;
      std::vector<std::vector<std::string>> predicted;
      gold.reserve(records.size());
      predicted.reserve(records.size());
      for (auto& record : records) {
        gold.push_back(std::move(record.gold_labels));
        predicted.push_back(std::move(record.pred_labels));
      }
      report = score_token_labels(gold, predicted);
      break;
    }
    case TaskKind::sequence_pair_classification: {
      report.metric = "accuracy";
      std::int64_t correct = 0;
      std::map<std::string, std::pair<std::int64_t, std::int64_t>> by_label;
      for (const auto& record : records) {
        const std::string& gold_name =
            dataset.label_vocab[static_cast<std::size_t>(record.gold_label)];
        auto& [label_correct, label_total] = by_label[gold_name];
        ++label_total;
        if (record.pred_label == record.gold_label) {
          ++correct;
          ++label_correct;
        }
      }
      report.value =
          count > 0 ? 100.0 * static_cast<double>(correct) / count : 100.0;
      for (const auto& [name, pair] : by_label) {
        report.per_class[name] =
            pair.second > 0 ? 100.0 * static_cast<double>(pair.first) / pair.second
                            : 0.0;
      }
      break;
    }
    case TaskKind::span_extraction: {
      report.metric = "exact_match";
      std::int64_t matches = 0;
      double f1_sum = 0.0;
      for (const auto& record : records) {
        if (record.exact_match) ++matches;
        f1_sum += record.token_f1;
      }
      report.value =
          count > 0 ? 100.0 * static_cast<double>(matches) / count : 100.0;
      report.secondary["token_f1"] = count > 0 ? f1_sum / count : 100.0;
      break;
    }
  }
  return report;
}

EfficiencyReport measure_efficiency(const Model& model,
                                    const std::vector<std::vector<int>>& sample,
                                    const Model* reference, int repetitions) {
  if (sample.empty()) throw DomainError("efficiency sample is empty");
  if (repetitions < 5) throw ConfigError("efficiency wants at least 5 repetitions");

  EfficiencyReport report;
  report.param_count = count_params(model);
  report.sample_count = static_cast<int>(sample.size());
  report.repetitions = repetitions;

  double flops = 0.0;
  for (const auto& row : sample) {
    flops += static_cast<double>(
        count_flops(model.config, model.head, static_cast<int>(row.size())));
  }
  report.flops_per_example = flops / static_cast<double>(sample.size());

  NoGradGuard guard;
  const auto pass = [&] {
    for (const auto& row : sample) {
      const std::vector<int> ones(row.size(), 1);
      forward(model, row, ones);
    }
  };
  pass();  // warm-up, untimed
  std::vector<double> timings;
  timings.reserve(static_cast<std::size_t>(repetitions));
  for (int rep = 0; rep < repetitions; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    pass();
    const auto t1 = std::chrono::steady_clock::now();
    timings.push_back(std::chrono::duration<double>(t1 - t0).count() /
                      static_cast<double>(sample.size()));
  }
  std::sort(timings.begin(), timings.end());
  const std::size_t mid = timings.size() / 2;
  report.seconds_per_example = timings.size() % 2 == 1
                                   ? timings[mid]
                                   : 0.5 * (timings[mid - 1] + timings[mid]);

  if (reference == &model) {
    // Compared to itself: all ratios are exactly 1.
    report.has_reference = true;
  } else if (reference != nullptr) {
    const EfficiencyReport base =
        measure_efficiency(*reference, sample, nullptr, repetitions);
    report.has_reference = true;
    report.param_ratio = static_cast<double>(report.param_count) /
                         static_cast<double>(base.param_count);
    report.flop_ratio = report.flops_per_example / base.flops_per_example;
    report.speed_ratio = report.seconds_per_example / base.seconds_per_example;
  }
  return report;
}

std::string compare_report(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw ContractError("compare_report wants at least one run");
  std::string out = "name\tmetric\tvalue\tdelta\tparams\tflops_ratio\tspeed_ratio\n";
  const RunSummary& base = runs.front();
  char buffer[256];
  for (const RunSummary& run : runs) {
    const double delta = run.eval.value - base.eval.value;
    const double flops_ratio =
        base.efficiency.flops_per_example > 0.0
            ? run.efficiency.flops_per_example / base.efficiency.flops_per_example
            : 1.0;
    const double speed_ratio =
        base.efficiency.seconds_per_example > 0.0
            ? run.efficiency.seconds_per_example / base.efficiency.seconds_per_example
            : 1.0;
    std::snprintf(buffer, sizeof(buffer), "%s\t%s\t%.2f\t%.2f\t%lld\t%.4f\t%.4f\n",
                  run.name.c_str(), run.eval.metric.c_str(), run.eval.value, delta,
                  static_cast<long long>(run.efficiency.param_count), flops_ratio,
                  speed_ratio);
    out += buffer;
  }
  return out;
}

}  // namespace bistil

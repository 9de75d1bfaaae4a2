// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task metrics and efficiency measurement. Token classification scores
// entity-level micro F1 over decoded BIO spans, pair classification scores
// accuracy, span extraction scores exact match plus token-overlap F1 with
// best-sum-of-logits span selection.

#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bistil/data.hpp"
#include "bistil/model.hpp"

namespace bistil {

struct EvalReport {
  /// Headline metric: "f1", "accuracy" or "exact_match".
  std::string metric;
  /// Percentage in [0, 100].
  double value = 0.0;
  /// Per entity type (F1) or per label (recall), also percentages.
  std::map<std::string, double> per_class;
  /// Companion metrics, e.g. precision/recall for F1, token_f1 for spans.
  std::map<std::string, double> secondary;
  int example_count = 0;
};

/// Inclusive word-index entity span. The sentence index keeps spans from
/// different examples distinct inside one set.
struct EntitySpan {
  int sentence = 0;
  int start = 0;
  int end = 0;
  std::string type;
  auto operator<=>(const EntitySpan&) const = default;
};

/// conlleval-style decoding: B-X starts an entity, I-X continues one of the
/// same type and otherwise starts a new entity, everything else is outside.
std::vector<EntitySpan> decode_bio(const std::vector<std::string>& labels,
                                   int sentence = 0);

/// Whitespace-token multiset overlap F1, as a percentage. Two empty strings
/// count as a perfect match.
double token_overlap_f1(const std::string& prediction, const std::string& gold);

/// Entity-level micro F1 between per-sentence BIO label sequences, with
/// per-type breakdown and precision/recall in `secondary`. No predicted and
/// no gold entities scores 100.
EvalReport score_token_labels(const std::vector<std::vector<std::string>>& gold,
                              const std::vector<std::vector<std::string>>& predicted);

/// Runs the model over the dataset and scores it. The vocabulary must be the
/// model's own (a student is evaluated through its reduced vocabulary). The
/// report is independent of max_threads.
EvalReport evaluate(const Model& model, const TaskDataset& dataset,
                    const Vocabulary& vocab, int max_threads = 1);

struct EfficiencyReport {
  std::int64_t param_count = 0;
  /// Analytic forward FLOPs, averaged over the sample's observed lengths.
  double flops_per_example = 0.0;
  /// Median over timed repetitions of a full batch-1 pass, warm-up excluded.
  double seconds_per_example = 0.0;
  int sample_count = 0;
  int repetitions = 0;
  /// candidate / reference; 1.0 when no reference was given.
  bool has_reference = false;
  double param_ratio = 1.0;
  double flop_ratio = 1.0;
  double speed_ratio = 1.0;
};

/// Times forward passes over the given token-id rows (attention all ones).
/// An untimed warm-up pass precedes `repetitions` timed passes; at least 5
/// repetitions are required so the median has something to work with.
EfficiencyReport measure_efficiency(const Model& model,
                                    const std::vector<std::vector<int>>& sample,
                                    const Model* reference = nullptr,
                                    int repetitions = 7);

struct RunSummary {
  std::string name;
  EvalReport eval;
  EfficiencyReport efficiency;
};

/// TSV with one row per run: name, metric, value, delta vs the first row,
/// params, flops_ratio and speed_ratio (both vs the first row).
std::string compare_report(const std::vector<RunSummary>& runs);

}  // namespace bistil

// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bistil/data.hpp"
#include "bistil/errors.hpp"
#include "bistil/eval.hpp"
#include "bistil/model.hpp"
#include "doctest.h"

using namespace bistil;

namespace {

// Enumerative oracle: an entity is any maximal interval that decodes on its
// own. Checks every (start, end) pair instead of walking the sequence.
std::vector<EntitySpan> oracle_bio(const std::vector<std::string>& labels,
                                   int sentence) {
  const auto tag_of = [&](std::size_t i) -> std::string {
    const auto& l = labels[i];
    if (l.size() > 2 && l[1] == '-' && (l[0] == 'B' || l[0] == 'I')) return l.substr(2);
    return "";
  };
  const auto continues = [&](std::size_t i, const std::string& type) {
    return labels[i].size() > 2 && labels[i][0] == 'I' && labels[i][1] == '-' &&
           tag_of(i) == type;
  };
  std::vector<EntitySpan> spans;
  const std::size_t n = labels.size();
  for (std::size_t s = 0; s < n; ++s) {
    const std::string type = tag_of(s);
    if (type.empty()) continue;
    // s must begin an entity: a B tag, or an I tag with no live predecessor.
    if (labels[s][0] == 'I' && s > 0 && (tag_of(s - 1) == type)) continue;
    std::size_t e = s;
    while (e + 1 < n && continues(e + 1, type)) ++e;
    spans.push_back({sentence, static_cast<int>(s), static_cast<int>(e), type});
  }
  return spans;
}

Model head_model(const ModelConfig& config, const TaskHead& head, int favored) {
  Model model = init_model(config, head, 7);
  // Zero head output weights and bias everything toward one class: the
  // prediction is then `favored` at every position, whatever the encoder does.
  for (auto& [name, tensor] : model.params) {
    if (name == "head.output.weight" || name == "head.span.weight") {
      for (auto& v : tensor.data()) v = 0.0f;
    }
    if (name == "head.output.bias" || name == "head.span.bias") {
      auto data = tensor.data();
      for (auto& v : data) v = 0.0f;
      if (favored >= 0 && favored < static_cast<int>(data.size())) {
        data[static_cast<std::size_t>(favored)] = 100.0f;
      }
    }
  }
  return model;
}

ModelConfig eval_config(int layers, int vocab_size) {
  ModelConfig config;
  config.num_layers = layers;
  config.hidden_dim = 16;
  config.num_heads = 2;
  config.ffn_dim = 32;
  config.vocab_size = vocab_size;
  config.max_seq_len = 32;
  return config;
}

Vocabulary word_vocab(const std::vector<std::string>& lines) {
  return build_vocabulary(lines, 400);
}

std::vector<std::string> report_lines(const std::string& report) {
  std::vector<std::string> lines;
  std::istringstream in(report);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("BIO decoding follows the conlleval conventions") {
  using Spans = std::vector<EntitySpan>;
  CHECK(decode_bio({}, 0).empty());
  CHECK(decode_bio({"O", "O", "O"}, 0).empty());
  CHECK(decode_bio({"B-PER", "I-PER", "O", "B-LOC"}, 0) ==
        Spans{{0, 0, 1, "PER"}, {0, 3, 3, "LOC"}});
  // An I tag with no live entity starts one.
  CHECK(decode_bio({"O", "I-LOC", "I-LOC"}, 2) == Spans{{2, 1, 2, "LOC"}});
  // A type switch inside an I run starts a new entity.
  CHECK(decode_bio({"B-PER", "I-LOC"}, 0) ==
        Spans{{0, 0, 0, "PER"}, {0, 1, 1, "LOC"}});
  // Adjacent B tags are two entities.
  CHECK(decode_bio({"B-T", "B-T"}, 0) == Spans{{0, 0, 0, "T"}, {0, 1, 1, "T"}});
  // Entities can end the sentence.
  CHECK(decode_bio({"O", "B-PER", "I-PER"}, 0) == Spans{{0, 1, 2, "PER"}});
}

TEST_CASE("BIO decoding agrees with an enumerative oracle on random fixtures") {
  const std::vector<std::string> alphabet{"O",    "B-T0", "I-T0",
                                          "B-T1", "I-T1", "O"};
  Rng rng(99);
  for (int fixture = 0; fixture < 60; ++fixture) {
    const int length = 1 + static_cast<int>(rng.uniform_int(0, 12));
    std::vector<std::string> labels;
    labels.reserve(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i) {
      labels.push_back(
          alphabet[static_cast<std::size_t>(rng.uniform_int(0, 6))]);
    }
    const auto got = decode_bio(labels, fixture);
    const auto want = oracle_bio(labels, fixture);
    CHECK(std::set<EntitySpan>(got.begin(), got.end()) ==
          std::set<EntitySpan>(want.begin(), want.end()));
  }
}

TEST_CASE("entity F1 matches a hand count on a labeled fixture") {
  // Twenty sentences; gold has 12 entities, the predictions get 6 of them
  // right, invent 3, miss 6, and mislabel 3 boundaries/types.
  std::vector<std::vector<std::string>> gold;
  std::vector<std::vector<std::string>> pred;
  for (int i = 0; i < 8; ++i) {
    // Correct on even sentences (6 right), entity dropped on the rest.
    gold.push_back({"B-PER", "I-PER", "O"});
    if (i % 4 != 3) {
      pred.push_back({"B-PER", "I-PER", "O"});
    } else {
      pred.push_back({"O", "O", "O"});
    }
  }
  for (int i = 0; i < 4; ++i) {
    // Gold LOC entity, predicted with a wrong boundary: miss plus false hit.
    gold.push_back({"O", "B-LOC", "I-LOC", "O"});
    pred.push_back({"O", "B-LOC", "O", "O"});
  }
  for (int i = 0; i < 3; ++i) {
    // No gold entity, one invented.
    gold.push_back({"O", "O"});
    pred.push_back({"B-ORG", "O"});
  }
  for (int i = 0; i < 5; ++i) {
    gold.push_back({"O", "O", "O"});
    pred.push_back({"O", "O", "O"});
  }
  REQUIRE(gold.size() == 20);

  // Hand count: gold entities 8 PER + 4 LOC = 12; predicted 6 PER + 4 LOC
  // + 3 ORG = 13; true positives 6 PER. P = 6/13, R = 6/12 = 1/2.
  const double p = 6.0 / 13.0;
  const double r = 0.5;
  const double f1 = 200.0 * p * r / (p + r);

  const EvalReport report = score_token_labels(gold, pred);
  CHECK(report.metric == "f1");
  CHECK(report.example_count == 20);
  CHECK(report.value == doctest::Approx(f1).epsilon(1e-9));
  CHECK(report.secondary.at("precision") == doctest::Approx(100.0 * p));
  CHECK(report.secondary.at("recall") == doctest::Approx(100.0 * r));
  // Per type: PER P=6/6, R=6/8 -> F1 = 2*(1)(0.75)/1.75.
  CHECK(report.per_class.at("PER") ==
        doctest::Approx(200.0 * 0.75 / 1.75).epsilon(1e-9));
  CHECK(report.per_class.at("LOC") == doctest::Approx(0.0));
  CHECK(report.per_class.at("ORG") == doctest::Approx(0.0));

  // Predictions identical to gold score 100.
  const EvalReport perfect = score_token_labels(gold, gold);
  CHECK(perfect.value == doctest::Approx(100.0));
  CHECK(perfect.secondary.at("precision") == doctest::Approx(100.0));

  // No entities anywhere is also a perfect match.
  const std::vector<std::vector<std::string>> blank{{"O", "O"}};
  CHECK(score_token_labels(blank, blank).value == doctest::Approx(100.0));

  CHECK_THROWS_AS(score_token_labels(gold, blank), ContractError);
}

TEST_CASE("token overlap F1 counts word multisets") {
  CHECK(token_overlap_f1("kolo rafa", "kolo rafa") == doctest::Approx(100.0));
  CHECK(token_overlap_f1("", "") == doctest::Approx(100.0));
  CHECK(token_overlap_f1("kolo", "") == doctest::Approx(0.0));
  CHECK(token_overlap_f1("", "kolo") == doctest::Approx(0.0));
  CHECK(token_overlap_f1("ba da", "ni mo") == doctest::Approx(0.0));
  // pred {a b c} vs gold {b c d}: tp 2, P = R = 2/3.
  CHECK(token_overlap_f1("a b c", "b c d") ==
        doctest::Approx(200.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0)));
  // Multiset: "a a" vs "a": tp 1, P 1/2, R 1.
  CHECK(token_overlap_f1("a a", "a") ==
        doctest::Approx(200.0 * 0.5 * 1.0 / 1.5));
  // Whitespace normalization is free.
  CHECK(token_overlap_f1("  kolo   rafa ", "kolo rafa") == doctest::Approx(100.0));
}

TEST_CASE("evaluate scores pair classification as accuracy") {
  TaskDataset data;
  data.kind = TaskKind::sequence_pair_classification;
  data.label_vocab = {"different", "same"};
  for (int i = 0; i < 10; ++i) {
    TaskExample ex;
    ex.premise = "ba da ka";
    ex.hypothesis = "ra ma ba";
    ex.label = i < 7 ? 1 : 0;  // 7 "same", 3 "different"
    data.examples.push_back(ex);
  }
  const Vocabulary vocab = word_vocab({"ba da ka ra ma"});
  const TaskHead head{HeadKind::sequence_classification, 2, 0};

  // Always predicts "same": accuracy equals the majority rate.
  const Model same_model = head_model(eval_config(1, vocab.size()), head, 1);
  const EvalReport majority = evaluate(same_model, data, vocab);
  CHECK(majority.metric == "accuracy");
  CHECK(majority.example_count == 10);
  CHECK(majority.value == doctest::Approx(70.0));
  CHECK(majority.per_class.at("same") == doctest::Approx(100.0));
  CHECK(majority.per_class.at("different") == doctest::Approx(0.0));

  // A dataset where every label is the favored one scores 100.
  TaskDataset all_same = data;
  for (auto& ex : all_same.examples) ex.label = 1;
  CHECK(evaluate(same_model, all_same, vocab).value == doctest::Approx(100.0));

  // Thread count cannot change the report.
  const EvalReport threaded = evaluate(same_model, data, vocab, 4);
  CHECK(threaded.value == majority.value);
  CHECK(threaded.per_class == majority.per_class);
  CHECK(threaded.example_count == majority.example_count);
}

TEST_CASE("evaluate scores token classification through BIO decoding") {
  TaskDataset data;
  data.kind = TaskKind::token_classification;
  data.label_vocab = {"B-T0", "I-T0", "O"};
  {
    TaskExample ex;
    ex.tokens = {"ba", "da", "ka"};
    ex.token_labels = {0, 1, 2};  // one gold entity
    data.examples.push_back(ex);
    ex.tokens = {"ra", "ma"};
    ex.token_labels = {2, 2};  // no entity
    data.examples.push_back(ex);
  }
  const Vocabulary vocab = word_vocab({"ba da ka ra ma"});
  const TaskHead head{HeadKind::token_classification, 3, 0};

  // Predicting O everywhere yields no predicted entities: F1 is 0.
  const Model all_o = head_model(eval_config(1, vocab.size()), head, 2);
  const EvalReport report = evaluate(all_o, data, vocab);
  CHECK(report.metric == "f1");
  CHECK(report.value == doctest::Approx(0.0));
  CHECK(report.secondary.at("recall") == doctest::Approx(0.0));

  // Predicting B-T0 everywhere: every position opens a one-word entity.
  // Sentence one holds spans (0,0),(1,1),(2,2); gold is (0,1). No overlap.
  const Model all_b = head_model(eval_config(1, vocab.size()), head, 0);
  CHECK(evaluate(all_b, data, vocab).value == doctest::Approx(0.0));
}

TEST_CASE("evaluate scores span extraction with first-tie selection") {
  const Vocabulary vocab = word_vocab({"kolo rafa gizu pemo"});
  TaskDataset data;
  data.kind = TaskKind::span_extraction;
  {
    TaskExample ex;
    ex.context = "kolo rafa gizu";
    ex.question = "pemo";
    ex.answer_text = "kolo";
    ex.answer_start = 0;
    data.examples.push_back(ex);
  }
  const TaskHead head{HeadKind::span_extraction, 0, 0};
  // Zeroed span head ties every candidate; the scan keeps the first one,
  // which is the single-token span at the start of the context.
  const Model model = head_model(eval_config(1, vocab.size()), head, -1);
  const EvalReport hit = evaluate(model, data, vocab);
  CHECK(hit.metric == "exact_match");
  CHECK(hit.value == doctest::Approx(100.0));
  CHECK(hit.secondary.at("token_f1") == doctest::Approx(100.0));

  // The same prediction is a partial overlap for a two-word answer.
  TaskDataset two_word = data;
  two_word.examples[0].answer_text = "kolo rafa";
  const EvalReport partial = evaluate(model, two_word, vocab);
  CHECK(partial.value == doctest::Approx(0.0));
  // pred {kolo} vs gold {kolo rafa}: P 1, R 1/2.
  CHECK(partial.secondary.at("token_f1") ==
        doctest::Approx(200.0 * 1.0 * 0.5 / 1.5));

  // An answer elsewhere in the context is a miss for the tied head.
  TaskDataset miss = data;
  miss.examples[0].answer_text = "gizu";
  miss.examples[0].answer_start = 10;
  const EvalReport missed = evaluate(model, miss, vocab);
  CHECK(missed.value == doctest::Approx(0.0));
  CHECK(missed.secondary.at("token_f1") == doctest::Approx(0.0));
}

TEST_CASE("evaluate validates head, labels and vocabulary") {
  const Vocabulary vocab = word_vocab({"ba da"});
  TaskDataset data;
  data.kind = TaskKind::sequence_pair_classification;
  data.label_vocab = {"a", "b"};
  TaskExample ex;
  ex.premise = "ba";
  ex.hypothesis = "da";
  ex.label = 0;
  data.examples.push_back(ex);

  const Model wrong_kind = head_model(
      eval_config(1, vocab.size()), TaskHead{HeadKind::token_classification, 2, 0}, 0);
  CHECK_THROWS_AS(evaluate(wrong_kind, data, vocab), ContractError);

  const Model wrong_labels = head_model(
      eval_config(1, vocab.size()), TaskHead{HeadKind::sequence_classification, 3, 0},
      0);
  CHECK_THROWS_AS(evaluate(wrong_labels, data, vocab), ContractError);

  const Model wrong_vocab = head_model(
      eval_config(1, vocab.size() + 5), TaskHead{HeadKind::sequence_classification, 2, 0},
      0);
  CHECK_THROWS_AS(evaluate(wrong_vocab, data, vocab), ContractError);
}

TEST_CASE("efficiency measurement tracks layer count") {
  const Vocabulary vocab = word_vocab({"ba da ka ra ma pa ta"});
  const TaskHead head{HeadKind::token_classification, 3, 0};
  const Model teacher = init_model(eval_config(4, vocab.size()), head, 3);
  const Model student = init_model(eval_config(2, vocab.size()), head, 4);

  std::vector<std::vector<int>> sample;
  for (int i = 0; i < 3; ++i) {
    sample.push_back(encode_line("ba da ka ra ma pa ta", vocab, 24));
  }

  const EfficiencyReport self = measure_efficiency(teacher, sample, &teacher, 5);
  CHECK(self.has_reference);
  CHECK(self.param_ratio == doctest::Approx(1.0));
  CHECK(self.flop_ratio == doctest::Approx(1.0));
  CHECK(self.speed_ratio == doctest::Approx(1.0));
  CHECK(self.param_count == count_params(teacher));
  CHECK(self.sample_count == 3);
  CHECK(self.seconds_per_example > 0.0);

  const EfficiencyReport ratio = measure_efficiency(student, sample, &teacher, 5);
  CHECK(ratio.has_reference);
  // Two of four layers with a tiny head: close to half the FLOPs.
  CHECK(ratio.flop_ratio > 0.48);
  CHECK(ratio.flop_ratio < 0.54);
  CHECK(ratio.param_ratio < 1.0);
  CHECK(ratio.speed_ratio > 0.0);

  // Analytic count agrees with the model's own counter at a fixed length.
  double expect = 0.0;
  for (const auto& row : sample) {
    expect += static_cast<double>(
        count_flops(student.config, student.head, static_cast<int>(row.size())));
  }
  CHECK(ratio.flops_per_example == doctest::Approx(expect / sample.size()));

  CHECK_THROWS_AS(measure_efficiency(teacher, {}, nullptr, 5), DomainError);
  CHECK_THROWS_AS(measure_efficiency(teacher, sample, nullptr, 3), ConfigError);
}

TEST_CASE("compare report lays out deltas against the first row") {
  EvalReport eval_a;
  eval_a.metric = "accuracy";
  eval_a.value = 80.0;
  EfficiencyReport eff_a;
  eff_a.param_count = 1000;
  eff_a.flops_per_example = 100.0;
  eff_a.seconds_per_example = 0.004;

  SUBCASE("single run has zero delta and unit ratios") {
    const auto lines = report_lines(compare_report({{"only", eval_a, eff_a}}));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "name\tmetric\tvalue\tdelta\tparams\tflops_ratio\tspeed_ratio");
    CHECK(lines[1] == "only\taccuracy\t80.00\t0.00\t1000\t1.0000\t1.0000");
  }

  SUBCASE("identical runs differ only by name") {
    const auto lines =
        report_lines(compare_report({{"a", eval_a, eff_a}, {"b", eval_a, eff_a}}));
    REQUIRE(lines.size() == 3);
    const auto strip_name = [](const std::string& line) {
      return line.substr(line.find('\t'));
    };
    CHECK(strip_name(lines[1]) == strip_name(lines[2]));
  }

  SUBCASE("three-run fixture matches hand-computed deltas") {
    EvalReport eval_b = eval_a;
    eval_b.value = 75.5;
    EvalReport eval_c = eval_a;
    eval_c.value = 90.25;
    EfficiencyReport eff_b = eff_a;
    eff_b.param_count = 500;
    eff_b.flops_per_example = 50.0;
    eff_b.seconds_per_example = 0.002;
    EfficiencyReport eff_c = eff_a;
    eff_c.param_count = 250;
    eff_c.flops_per_example = 25.0;
    eff_c.seconds_per_example = 0.001;

    const auto lines = report_lines(compare_report(
        {{"base", eval_a, eff_a}, {"half", eval_b, eff_b}, {"quarter", eval_c, eff_c}}));
    REQUIRE(lines.size() == 4);
    CHECK(lines[1] == "base\taccuracy\t80.00\t0.00\t1000\t1.0000\t1.0000");
    CHECK(lines[2] == "half\taccuracy\t75.50\t-4.50\t500\t0.5000\t0.5000");
    CHECK(lines[3] == "quarter\taccuracy\t90.25\t10.25\t250\t0.2500\t0.2500");
  }

  SUBCASE("no runs is a contract error") {
    CHECK_THROWS_AS(compare_report({}), ContractError);
  }
}

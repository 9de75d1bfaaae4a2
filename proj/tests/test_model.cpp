// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bistil/model.hpp"
#include "bistil/rng.hpp"

using namespace bistil;

namespace {

ModelConfig small_config(int layers = 2, int vocab = 20) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 16;
  c.num_heads = 4;
  c.ffn_dim = 32;
  c.vocab_size = vocab;
  c.max_seq_len = 12;
  c.dropout = 0.0f;
  return c;
}

bool params_bitwise_equal(const Model& a, const Model& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [name, tensor] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end()) return false;
    if (tensor.shape() != it->second.shape()) return false;
    if (std::memcmp(tensor.data().data(), it->second.data().data(),
                    tensor.data().size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<int> ones(int n) { return std::vector<int>(static_cast<std::size_t>(n), 1); }

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(validate_config(c));
  c.hidden_dim = 15;
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.num_layers = 0;
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.vocab_size = 3;
  CHECK_THROWS_AS(validate_config(c), ConfigError);
  c = small_config();
  c.dropout = 1.0f;
  CHECK_THROWS_AS(validate_config(c), ConfigError);

  TaskHead bad;
  bad.kind = HeadKind::token_classification;
  bad.num_labels = 1;
  CHECK_THROWS_AS(init_model(small_config(), bad, 1), ConfigError);
}

TEST_CASE("init_model is deterministic and follows the init rules") {
  TaskHead head;
  head.kind = HeadKind::mlm;
  Model a = init_model(small_config(), head, 7);
  Model b = init_model(small_config(), head, 7);
  CHECK(params_bitwise_equal(a, b));
  CHECK(fingerprint(a) == fingerprint(b));

  Model c = init_model(small_config(), head, 8);
  CHECK(!params_bitwise_equal(a, c));
  CHECK(fingerprint(a) != fingerprint(c));

  for (float v : a.params.at("encoder.layer.00.attention.layernorm.gain").data()) {
    CHECK(v == 1.0f);
  }
  for (float v : a.params.at("encoder.layer.01.ffn.output.bias").data()) {
    CHECK(v == 0.0f);
  }
  for (float v : a.params.at("mlm.output_bias").data()) CHECK(v == 0.0f);
}

TEST_CASE("init_model weight statistics match the truncated normal") {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden_dim = 768;
  c.num_heads = 12;
  c.ffn_dim = 64;
  c.vocab_size = 8;
  c.max_seq_len = 4;
  Model m = init_model(c, TaskHead{}, 42);
  auto w = m.params.at("encoder.layer.00.attention.query.weight").data();
  double mean = 0.0;
  for (float v : w) {
    CHECK(std::abs(v) <= 0.04f);  // hard cutoff at 2 sigma
    mean += v;
  }
  const double n = static_cast<double>(w.size());
  mean /= n;
  double var = 0.0;
  for (float v : w) var += (v - mean) * (v - mean);
  const double sample_std = std::sqrt(var / n);

  // Standard deviation of a +/-2 sigma truncated normal with scale 0.02.
  const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * 3.14159265358979323846);
  const double mass = std::erf(2.0 / std::sqrt(2.0));
  const double sigma_t = 0.02 * std::sqrt(1.0 - 4.0 * phi2 / mass);
  CHECK(std::abs(mean) < 1e-4);
  CHECK(std::abs(sample_std - sigma_t) < 1e-4);
}

TEST_CASE("forward trace shape and attention normalization") {
  TaskHead head;
  head.kind = HeadKind::mlm;
  Model m = init_model(small_config(), head, 3);
  std::vector<int> ids = {kClsId, 6, 7, 8, kSepId, kPadId, kPadId};
  std::vector<int> mask = {1, 1, 1, 1, 1, 0, 0};
  ActivationTrace trace = forward(m, ids, mask);

  CHECK(trace.attn.size() == 2);
  CHECK(trace.hidden.size() == 3);
  CHECK(trace.logits.defined());
  CHECK(trace.logits.shape() == std::vector<int>{7, 20});

  const int l = 7;
  for (const Tensor& a : trace.attn) {
    CHECK(a.shape() == std::vector<int>{4, l, l});
    const auto d = a.data();
    for (int h = 0; h < 4; ++h) {
      for (int q = 0; q < l; ++q) {
        double row = 0.0;
        for (int k = 0; k < l; ++k) row += d[(h * l + q) * l + k];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
        // Padding keys receive zero weight.
        CHECK(d[(h * l + q) * l + 5] == 0.0f);
        CHECK(d[(h * l + q) * l + 6] == 0.0f);
      }
    }
  }
}

TEST_CASE("single-token input attends only to itself") {
  Model m = init_model(small_config(), TaskHead{}, 5);
  std::vector<int> ids = {kClsId};
  std::vector<int> mask = {1};
  ActivationTrace trace = forward(m, ids, mask);
  for (const Tensor& a : trace.attn) {
    CHECK(a.shape() == std::vector<int>{4, 1, 1});
    for (float v : a.data()) CHECK(v == doctest::Approx(1.0));
  }
  CHECK(!trace.logits.defined());
}

TEST_CASE("embedding output is the sum of token and position rows") {
  Model m = init_model(small_config(), TaskHead{}, 11);
  std::vector<int> ids = {5, 9, 5};
  ActivationTrace trace = forward(m, ids, ones(3));
  const auto tok = m.params.at("embeddings.token").data();
  const auto pos = m.params.at("embeddings.position").data();
  const auto h0 = trace.hidden[0].data();
  const int d = 16;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < d; ++j) {
      const float expect = tok[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d + j] +
                           pos[static_cast<std::size_t>(i) * d + j];
      CHECK(h0[static_cast<std::size_t>(i) * d + j] ==
            doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("zeroed position embeddings make the encoder permutation-equivariant") {
  Model m = init_model(small_config(), TaskHead{}, 13);
  auto pos = m.params.at("embeddings.position").data();
  std::fill(pos.begin(), pos.end(), 0.0f);

  std::vector<int> ids = {6, 7, 8, 9};
  std::vector<int> swapped = {6, 8, 7, 9};  // positions 1 and 2 exchanged
  ActivationTrace a = forward(m, ids, ones(4));
  ActivationTrace b = forward(m, swapped, ones(4));
  const auto ha = a.hidden.back().data();
  const auto hb = b.hidden.back().data();
  const int d = 16;
  auto row = [&](std::span<const float> h, int r, int j) {
    return h[static_cast<std::size_t>(r) * d + j];
  };
  for (int j = 0; j < d; ++j) {
    CHECK(row(ha, 0, j) == doctest::Approx(row(hb, 0, j)).epsilon(1e-5));
    CHECK(row(ha, 1, j) == doctest::Approx(row(hb, 2, j)).epsilon(1e-5));
    CHECK(row(ha, 2, j) == doctest::Approx(row(hb, 1, j)).epsilon(1e-5));
    CHECK(row(ha, 3, j) == doctest::Approx(row(hb, 3, j)).epsilon(1e-5));
  }
}

TEST_CASE("forward input validation") {
  Model m = init_model(small_config(), TaskHead{}, 1);
  std::vector<int> ids = {1, 2};
  CHECK_THROWS_AS(forward(m, ids, ones(3)), DimensionError);
  std::vector<int> big(13, 1);
  CHECK_THROWS_AS(forward(m, big, ones(13)), InputError);
  std::vector<int> bad_id = {1, 20};
  CHECK_THROWS_AS(forward(m, bad_id, ones(2)), InputError);
  std::vector<int> bad_mask = {1, 2};
  CHECK_THROWS_AS(forward(m, ids, bad_mask), InputError);
  std::vector<int> empty;
  CHECK_THROWS_AS(forward(m, empty, empty), InputError);
}

TEST_CASE("head logits shapes") {
  SUBCASE("token classification, single layer") {
    TaskHead head;
    head.kind = HeadKind::token_classification;
    head.num_labels = 5;
    Model m = init_model(small_config(), head, 2);
    ActivationTrace t = forward(m, std::vector<int>{1, 2, 3}, ones(3));
    CHECK(t.logits.shape() == std::vector<int>{3, 5});
  }
  SUBCASE("token classification with intermediate") {
    TaskHead head;
    head.kind = HeadKind::token_classification;
    head.num_labels = 5;
    head.intermediate_dim = 24;
    Model m = init_model(small_config(), head, 2);
    CHECK(m.params.count("head.intermediate.weight") == 1);
    ActivationTrace t = forward(m, std::vector<int>{1, 2, 3}, ones(3));
    CHECK(t.logits.shape() == std::vector<int>{3, 5});
  }
  SUBCASE("sequence classification pools the first row") {
    TaskHead head;
    head.kind = HeadKind::sequence_classification;
    head.num_labels = 3;
    Model m = init_model(small_config(), head, 2);
    ActivationTrace t = forward(m, std::vector<int>{kClsId, 8, kSepId}, ones(3));
    CHECK(t.logits.shape() == std::vector<int>{1, 3});
  }
  SUBCASE("span extraction emits start and end columns") {
    TaskHead head;
    head.kind = HeadKind::span_extraction;
    Model m = init_model(small_config(), head, 2);
    ActivationTrace t = forward(m, std::vector<int>{1, 2, 3, 4}, ones(4));
    CHECK(t.logits.shape() == std::vector<int>{4, 2});
  }
  SUBCASE("mlm logits restricted to chosen positions") {
    TaskHead head;
    head.kind = HeadKind::mlm;
    Model m = init_model(small_config(), head, 2);
    ForwardOptions options;
    options.mlm_positions = {1, 3};
    ActivationTrace t = forward(m, std::vector<int>{1, 2, 3, 4}, ones(4), options);
    CHECK(t.logits.shape() == std::vector<int>{2, 20});
    options.mlm_positions = {7};
    CHECK_THROWS_AS(forward(m, std::vector<int>{1, 2, 3, 4}, ones(4), options),
                    InputError);
  }
}

TEST_CASE("student construction copies strided layers") {
  TaskHead head;
  head.kind = HeadKind::mlm;

  SUBCASE("lrf 1 with identity map is the identity") {
    Model teacher = init_model(small_config(4), head, 21);
    Model student =
        init_student_from_teacher(teacher, 1, identity_vocab_map(20));
    CHECK(params_bitwise_equal(teacher, student));
    CHECK(fingerprint(teacher) == fingerprint(student));
  }

  SUBCASE("lrf 2 on four layers keeps layers 2 and 4") {
    Model teacher = init_model(small_config(4), head, 22);
    Model student = init_student_from_teacher(teacher, 2, identity_vocab_map(20));
    CHECK(student.config.num_layers == 2);
    for (const char* leaf : {"attention.query.weight", "ffn.output.bias",
                             "attention.layernorm.gain"}) {
      auto t1 = teacher.params.at(std::string("encoder.layer.01.") + leaf).data();
      auto s0 = student.params.at(std::string("encoder.layer.00.") + leaf).data();
      CHECK(std::memcmp(t1.data(), s0.data(), t1.size() * sizeof(float)) == 0);
      auto t3 = teacher.params.at(std::string("encoder.layer.03.") + leaf).data();
      auto s1 = student.params.at(std::string("encoder.layer.01.") + leaf).data();
      CHECK(std::memcmp(t3.data(), s1.data(), t3.size() * sizeof(float)) == 0);
    }
  }

  SUBCASE("every divisible teacher/lrf pair maps the right layers") {
    for (int layers : {4, 6, 12}) {
      for (int lrf : {2, 3}) {
        Model teacher = init_model(small_config(layers), head, 23);
        if (layers % lrf != 0) {
          CHECK_THROWS_AS(
              init_student_from_teacher(teacher, lrf, identity_vocab_map(20)),
              ConfigError);
          continue;
        }
        Model student =
            init_student_from_teacher(teacher, lrf, identity_vocab_map(20));
        CHECK(student.config.num_layers == layers / lrf);
        for (int sj = 0; sj < student.config.num_layers; ++sj) {
          const int tj = (sj + 1) * lrf - 1;
          char sbuf[64], tbuf[64];
          std::snprintf(sbuf, sizeof(sbuf),
                        "encoder.layer.%02d.attention.value.weight", sj);
          std::snprintf(tbuf, sizeof(tbuf),
                        "encoder.layer.%02d.attention.value.weight", tj);
          auto s = student.params.at(sbuf).data();
          auto t = teacher.params.at(tbuf).data();
          CHECK(std::memcmp(s.data(), t.data(), s.size() * sizeof(float)) == 0);
        }
      }
    }
  }

  SUBCASE("vocab slicing applies to the student") {
    Model teacher = init_model(small_config(4), head, 24);
    std::vector<double> p_src(20, 0.0), p_tgt(20, 0.0);
    p_src[7] = 1e-3;
    p_tgt[9] = 1e-3;
    VocabMap map = reduce_vocabulary(p_src, p_tgt);
    Model student = init_student_from_teacher(teacher, 2, map);
    CHECK(student.config.vocab_size == 7);
    const int d = 16;
    auto told = teacher.params.at("embeddings.token").data();
    auto snew = student.params.at("embeddings.token").data();
    // New row 5 is old row 7 (specials occupy 0..4).
    CHECK(std::memcmp(snew.data() + 5 * d, told.data() + 7 * d,
                      static_cast<std::size_t>(d) * sizeof(float)) == 0);
    CHECK(std::memcmp(snew.data() + 6 * d, told.data() + 9 * d,
                      static_cast<std::size_t>(d) * sizeof(float)) == 0);
  }

  SUBCASE("task heads are not inherited") {
    TaskHead cls;
    cls.kind = HeadKind::sequence_classification;
    cls.num_labels = 3;
    Model teacher = init_model(small_config(4), cls, 25);
    Model student = init_student_from_teacher(teacher, 2, identity_vocab_map(20));
    CHECK(student.head.kind == HeadKind::none);
    CHECK(student.params.count("head.pooler.weight") == 0);
  }
}

TEST_CASE("slice_embeddings row-copy oracle on a random map") {
  TaskHead head;
  head.kind = HeadKind::mlm;
  Model m = init_model(small_config(2, 40), head, 31);
  Rng rng(77);
  std::vector<double> p_src(40, 0.0), p_tgt(40, 0.0);
  for (int i = 5; i < 40; ++i) {
    if (rng.bernoulli(0.4)) p_src[static_cast<std::size_t>(i)] = 1e-3;
    if (rng.bernoulli(0.3)) p_tgt[static_cast<std::size_t>(i)] = 1e-3;
  }
  VocabMap map = reduce_vocabulary(p_src, p_tgt);
  Model sliced = slice_embeddings(m, map);
  CHECK(sliced.config.vocab_size == map.new_size());

  const int d = 16;
  auto old_emb = m.params.at("embeddings.token").data();
  auto new_emb = sliced.params.at("embeddings.token").data();
  auto old_bias = m.params.at("mlm.output_bias").data();
  auto new_bias = sliced.params.at("mlm.output_bias").data();
  for (std::size_t n = 0; n < map.kept.size(); ++n) {
    const std::size_t o = static_cast<std::size_t>(map.kept[n]);
    for (int j = 0; j < d; ++j) {
      CHECK(new_emb[n * d + static_cast<std::size_t>(j)] ==
            old_emb[o * d + static_cast<std::size_t>(j)]);
    }
    CHECK(new_bias[n] == old_bias[o]);
  }
  // Non-embedding parameters are untouched.
  auto old_q = m.params.at("encoder.layer.00.attention.query.weight").data();
  auto new_q = sliced.params.at("encoder.layer.00.attention.query.weight").data();
  CHECK(std::memcmp(old_q.data(), new_q.data(), old_q.size() * sizeof(float)) == 0);

  VocabMap stale = identity_vocab_map(10);
  CHECK_THROWS_AS(slice_embeddings(m, stale), ContractError);
}

TEST_CASE("reduced model logits match on kept tokens") {
  TaskHead head;
  head.kind = HeadKind::mlm;
  Model m = init_model(small_config(2, 40), head, 33);
  std::vector<double> p_src(40, 0.0), p_tgt(40, 0.0);
  for (int i : {6, 8, 9, 13, 21, 34}) p_src[static_cast<std::size_t>(i)] = 1e-3;
  for (int i : {9, 14, 21, 35}) p_tgt[static_cast<std::size_t>(i)] = 1e-3;
  VocabMap map = reduce_vocabulary(p_src, p_tgt);
  Model sliced = slice_embeddings(m, map);

  // Input of kept tokens only, remapped for the reduced model.
  std::vector<int> old_ids = {kClsId, 6, 21, 9, kSepId};
  std::vector<int> new_ids;
  for (int id : old_ids) new_ids.push_back(map.old_to_new.at(id));
  ActivationTrace t_old = forward(m, old_ids, ones(5));
  ActivationTrace t_new = forward(sliced, new_ids, ones(5));

  const auto lo = t_old.logits.data();
  const auto ln = t_new.logits.data();
  for (int r = 0; r < 5; ++r) {
    for (std::size_t n = 0; n < map.kept.size(); ++n) {
      const float a = lo[static_cast<std::size_t>(r) * 40 +
                         static_cast<std::size_t>(map.kept[n])];
      const float b = ln[static_cast<std::size_t>(r) * map.kept.size() + n];
      CHECK(std::abs(a - b) < 1e-5f);
    }
  }
}

TEST_CASE("count_params closed form for one layer at mBERT scale") {
  ModelConfig c;
  c.num_layers = 1;
  c.hidden_dim = 768;
  c.num_heads = 12;
  c.ffn_dim = 3072;
  c.vocab_size = 5;
  c.max_seq_len = 2;
  Model with_embeddings = init_model(c, TaskHead{}, 1);
  const std::int64_t embeddings = 5 * 768 + 2 * 768;
  CHECK(count_params(with_embeddings) - embeddings == 7087872);

  // Enumeration oracle across several configs.
  for (int layers : {1, 3}) {
    ModelConfig sc = c;
    sc.num_layers = layers;
    sc.hidden_dim = 32;
    sc.ffn_dim = 64;
    sc.num_heads = 4;
    TaskHead head;
    head.kind = HeadKind::token_classification;
    head.num_labels = 7;
    Model m = init_model(sc, head, 2);
    std::int64_t manual = 0;
    for (auto& [name, shape] : parameter_shapes(sc, head)) {
      (void)name;
      std::int64_t n = 1;
      for (int dim : shape) n *= dim;
      manual += n;
    }
    CHECK(count_params(m) == manual);
  }

  // A head contributes nothing when absent.
  Model bare = init_model(small_config(), TaskHead{}, 3);
  TaskHead span;
  span.kind = HeadKind::span_extraction;
  Model headed = init_model(small_config(), span, 3);
  CHECK(count_params(headed) - count_params(bare) == 16 * 2 + 2);
}

TEST_CASE("count_flops layer ratios") {
  ModelConfig teacher;
  teacher.num_layers = 12;
  teacher.hidden_dim = 768;
  teacher.num_heads = 12;
  teacher.ffn_dim = 3072;
  teacher.vocab_size = 120000;
  teacher.max_seq_len = 512;

  ModelConfig six = teacher;
  six.num_layers = 6;
  ModelConfig four = teacher;
  four.num_layers = 4;

  const int l = 128;
  const double base = static_cast<double>(count_flops(teacher, TaskHead{}, l));
  CHECK(static_cast<double>(count_flops(six, TaskHead{}, l)) / base ==
        doctest::Approx(0.50).epsilon(0.02));
  CHECK(static_cast<double>(count_flops(four, TaskHead{}, l)) / base ==
        doctest::Approx(1.0 / 3.0).epsilon(0.02));

  // A ~23M-parameter head shifts the 6-vs-12 ratio toward one.
  TaskHead big;
  big.kind = HeadKind::token_classification;
  big.num_labels = 50;
  big.intermediate_dim = 28000;
  const std::int64_t head_params =
      768LL * 28000 + 28000 + 28000LL * 50 + 50;
  CHECK(head_params > 22000000);
  CHECK(head_params < 24000000);
  const double ratio = static_cast<double>(count_flops(six, big, l)) /
                       static_cast<double>(count_flops(teacher, big, l));
  CHECK(ratio > 0.55);
  CHECK(ratio < 0.70);

  CHECK_THROWS_AS(count_flops(teacher, TaskHead{}, 513), ContractError);
}

TEST_CASE("checkpoint round trip preserves the model bitwise") {
  TaskHead head;
  head.kind = HeadKind::mlm;
  Model m = init_model(small_config(2, 18), head, 55);
  std::vector<std::string> tokens = Vocabulary::special_tokens();
  for (int i = 0; i < 13; ++i) tokens.push_back("tok" + std::to_string(i));
  Vocabulary vocab(tokens);

  const std::string dir = "ckpt_roundtrip";
  save_checkpoint(m, vocab, dir);
  Checkpoint loaded = load_checkpoint(dir);
  CHECK(params_bitwise_equal(m, loaded.model));
  CHECK(fingerprint(m) == fingerprint(loaded.model));
  CHECK(loaded.vocab.tokens() == vocab.tokens());
  CHECK(loaded.model.head.kind == HeadKind::mlm);
  CHECK(loaded.model.params.at("embeddings.token").requires_grad());

  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_checkpoint("no_such_dir"), IoError);
  }
  SUBCASE("vocab size mismatch") {
    std::vector<std::string> extra = tokens;
    extra.push_back("straggler");
    save_vocabulary(Vocabulary(extra), dir + "/vocab.txt");
    CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  }
  SUBCASE("truncated weights") {
    save_checkpoint(m, vocab, dir);
    std::filesystem::resize_file(dir + "/weights.bin", 100);
    CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  }
  SUBCASE("tampered manifest name") {
    save_checkpoint(m, vocab, dir);
    std::ifstream in(dir + "/manifest.tsv");
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    all.replace(all.find("embeddings.token"), 16, "embeddings.tokum");
    std::ofstream out(dir + "/manifest.tsv", std::ios::binary);
    out << all;
    out.close();
    CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("save_checkpoint rejects a mismatched vocabulary") {
  Model m = init_model(small_config(1, 6), TaskHead{}, 9);
  std::vector<std::string> tokens = Vocabulary::special_tokens();
  tokens.push_back("a");
  tokens.push_back("b");
  Vocabulary vocab(tokens);  // 7 tokens vs vocab_size 6
  CHECK_THROWS_AS(save_checkpoint(m, vocab, "ckpt_bad"), ContractError);
}

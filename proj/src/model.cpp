// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace bistil {

namespace {

std::string layer_prefix(int layer) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "encoder.layer.%02d.", layer);
  return buf;
}

using ParamSpec = std::pair<std::string, std::vector<int>>;

std::vector<ParamSpec> param_specs(const ModelConfig& c, const TaskHead& head) {
  const int d = c.hidden_dim;
  std::vector<ParamSpec> specs;
  specs.emplace_back("embeddings.token", std::vector<int>{c.vocab_size, d});
  specs.emplace_back("embeddings.position", std::vector<int>{c.max_seq_len, d});
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = layer_prefix(i);
    for (const char* proj : {"query", "key", "value", "output"}) {
      specs.emplace_back(p + "attention." + proj + ".weight", std::vector<int>{d, d});
      specs.emplace_back(p + "attention." + proj + ".bias", std::vector<int>{d});
    }
    specs.emplace_back(p + "attention.layernorm.gain", std::vector<int>{d});
    specs.emplace_back(p + "attention.layernorm.bias", std::vector<int>{d});
    specs.emplace_back(p + "ffn.intermediate.weight", std::vector<int>{d, c.ffn_dim});
    specs.emplace_back(p + "ffn.intermediate.bias", std::vector<int>{c.ffn_dim});
    specs.emplace_back(p + "ffn.output.weight", std::vector<int>{c.ffn_dim, d});
    specs.emplace_back(p + "ffn.output.bias", std::vector<int>{d});
    specs.emplace_back(p + "ffn.layernorm.gain", std::vector<int>{d});
    specs.emplace_back(p + "ffn.layernorm.bias", std::vector<int>{d});
  }
  switch (head.kind) {
    case HeadKind::none:
      break;
    case HeadKind::mlm:
      specs.emplace_back("mlm.transform.weight", std::vector<int>{d, d});
      specs.emplace_back("mlm.transform.bias", std::vector<int>{d});
      specs.emplace_back("mlm.transform.layernorm.gain", std::vector<int>{d});
      specs.emplace_back("mlm.transform.layernorm.bias", std::vector<int>{d});
      specs.emplace_back("mlm.output_bias", std::vector<int>{c.vocab_size});
      break;
    case HeadKind::token_classification: {
      const int in = head.intermediate_dim > 0 ? head.intermediate_dim : d;
      if (head.intermediate_dim > 0) {
        specs.emplace_back("head.intermediate.weight",
                           std::vector<int>{d, head.intermediate_dim});
        specs.emplace_back("head.intermediate.bias",
                           std::vector<int>{head.intermediate_dim});
      }
      specs.emplace_back("head.output.weight", std::vector<int>{in, head.num_labels});
      specs.emplace_back("head.output.bias", std::vector<int>{head.num_labels});
      break;
    }
    case HeadKind::sequence_classification:
      specs.emplace_back("head.pooler.weight", std::vector<int>{d, d});
      specs.emplace_back("head.pooler.bias", std::vector<int>{d});
      specs.emplace_back("head.output.weight", std::vector<int>{d, head.num_labels});
      specs.emplace_back("head.output.bias", std::vector<int>{head.num_labels});
      break;
    case HeadKind::span_extraction:
      specs.emplace_back("head.span.weight", std::vector<int>{d, 2});
      specs.emplace_back("head.span.bias", std::vector<int>{2});
      break;
  }
  std::sort(specs.begin(), specs.end(),
            [](const ParamSpec& a, const ParamSpec& b) { return a.first < b.first; });
  return specs;
}

void validate_head(const TaskHead& head) {
  switch (head.kind) {
    case HeadKind::none:
    case HeadKind::mlm:
    case HeadKind::span_extraction:
      break;
    case HeadKind::token_classification:
    case HeadKind::sequence_classification:
      if (head.num_labels < 2) {
        throw ConfigError("task head wants at least 2 labels");
      }
      break;
  }
  if (head.intermediate_dim < 0) {
    throw ConfigError("task head intermediate_dim must be nonnegative");
  }
}

const Tensor& param(const Model& model, const std::string& name) {
  auto it = model.params.find(name);
  if (it == model.params.end()) {
    throw ContractError("model parameter missing: " + name);
  }
  return it->second;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

const char* head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::none: return "none";
    case HeadKind::mlm: return "mlm";
    case HeadKind::token_classification: return "token_classification";
    case HeadKind::sequence_classification: return "sequence_classification";
    case HeadKind::span_extraction: return "span_extraction";
  }
  throw ContractError("unknown head kind");
}

HeadKind head_kind_from_name(const std::string& name) {
  for (HeadKind kind :
       {HeadKind::none, HeadKind::mlm, HeadKind::token_classification,
        HeadKind::sequence_classification, HeadKind::span_extraction}) {
    if (name == head_kind_name(kind)) return kind;
  }
  throw ParseError("unknown head kind '" + name + "'");
}

void validate_config(const ModelConfig& c) {
  if (c.num_layers < 1 || c.num_layers > 99) {
    throw ConfigError("num_layers must be in 1..99, got " +
                      std::to_string(c.num_layers));
  }
  if (c.hidden_dim < 1 || c.num_heads < 1 || c.ffn_dim < 1 || c.max_seq_len < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (c.hidden_dim % c.num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(c.hidden_dim) +
                      " not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (c.vocab_size < kNumSpecialTokens) {
    throw ConfigError("vocab_size below the special-token count");
  }
  if (c.dropout < 0.0f || c.dropout >= 1.0f) {
    throw ConfigError("dropout must be in [0,1)");
  }
}

std::vector<std::pair<std::string, std::vector<int>>> parameter_shapes(
    const ModelConfig& config, const TaskHead& head) {
  return param_specs(config, head);
}

std::vector<std::string> parameter_names(const ModelConfig& config,
                                         const TaskHead& head) {
  std::vector<std::string> names;
  for (auto& [name, shape] : param_specs(config, head)) {
    (void)shape;
    names.push_back(name);
  }
  return names;
}

Model init_model(const ModelConfig& config, const TaskHead& head, std::uint64_t seed) {
  validate_config(config);
  validate_head(head);
  Model model;
  model.config = config;
  model.head = head;
  Rng rng(seed);
  for (auto& [name, shape] : param_specs(config, head)) {
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    if (ends_with(name, ".gain")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else if (ends_with(name, ".bias") || name == "mlm.output_bias") {
      // stays zero
    } else {
      for (auto& v : t.data()) v = rng.truncated_normal(0.02f);
    }
    model.params.emplace(name, std::move(t));
  }
  return model;
}

ActivationTrace forward(const Model& model, std::span<const int> input_ids,
                        std::span<const int> attention_mask,
                        const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  const int l = static_cast<int>(input_ids.size());
  if (l < 1 || l > c.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(l) +
                     " outside [1," + std::to_string(c.max_seq_len) + "]");
  }
  if (attention_mask.size() != input_ids.size()) {
    throw DimensionError("forward: attention mask length " +
                         std::to_string(attention_mask.size()) + " != " +
                         std::to_string(input_ids.size()));
  }
  for (int id : input_ids) {
    if (id < 0 || id >= c.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(c.vocab_size));
    }
  }
  for (int m : attention_mask) {
    if (m != 0 && m != 1) {
      throw InputError("forward: attention mask entries must be 0 or 1");
    }
  }
  const bool use_dropout = options.training && c.dropout > 0.0f;
  if (use_dropout && options.rng == nullptr) {
    throw ContractError("forward: training with dropout wants an rng");
  }
  auto maybe_dropout = [&](const Tensor& x) {
    return use_dropout ? dropout(x, c.dropout, *options.rng) : x;
  };

  const int d = c.hidden_dim;
  const int heads = c.num_heads;
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(d / heads));

  // Additive key mask, broadcast over every query row.
  Tensor key_mask = Tensor::zeros({l});
  {
    auto km = key_mask.data();
    for (int i = 0; i < l; ++i) km[i] = attention_mask[i] == 1 ? 0.0f : -1e9f;
  }

  std::vector<int> positions(static_cast<std::size_t>(l));
  std::iota(positions.begin(), positions.end(), 0);

  ActivationTrace trace;
  Tensor h = add(embed_lookup(param(model, "embeddings.token"), input_ids),
                 embed_lookup(param(model, "embeddings.position"), positions));
  h = maybe_dropout(h);
  trace.hidden.push_back(h);

  auto linear = [&](const Tensor& x, const std::string& stem) {
    return add(matmul(x, param(model, stem + ".weight")), param(model, stem + ".bias"));
  };

  for (int layer = 0; layer < c.num_layers; ++layer) {
    const std::string p = layer_prefix(layer);
    Tensor q = split_heads(linear(h, p + "attention.query"), heads);
    Tensor k = split_heads(linear(h, p + "attention.key"), heads);
    Tensor v = split_heads(linear(h, p + "attention.value"), heads);
    Tensor scores = add(scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt_dh),
                        key_mask);
    Tensor attn = softmax(scores);
    trace.attn.push_back(attn);
    Tensor context = merge_heads(matmul(attn, v));
    Tensor attn_out = maybe_dropout(linear(context, p + "attention.output"));
    h = layernorm(add(h, attn_out), param(model, p + "attention.layernorm.gain"),
                  param(model, p + "attention.layernorm.bias"));
    Tensor ffn = linear(gelu(linear(h, p + "ffn.intermediate")), p + "ffn.output");
    ffn = maybe_dropout(ffn);
    h = layernorm(add(h, ffn), param(model, p + "ffn.layernorm.gain"),
                  param(model, p + "ffn.layernorm.bias"));
    trace.hidden.push_back(h);
  }

  switch (model.head.kind) {
    case HeadKind::none:
      break;
    case HeadKind::mlm: {
      std::vector<int> rows = options.mlm_positions;
      if (rows.empty()) {
        rows = positions;
      } else {
        for (int r : rows) {
          if (r < 0 || r >= l) {
            throw InputError("forward: mlm position " + std::to_string(r) +
                             " outside sequence of length " + std::to_string(l));
          }
        }
      }
      Tensor t = select_rows(h, rows);
      t = layernorm(gelu(linear(t, "mlm.transform")),
                    param(model, "mlm.transform.layernorm.gain"),
                    param(model, "mlm.transform.layernorm.bias"));
      trace.logits = add(matmul(t, param(model, "embeddings.token"),
                                /*transpose_b=*/true),
                         param(model, "mlm.output_bias"));
      break;
    }
    case HeadKind::token_classification: {
      Tensor x = h;
      if (model.head.intermediate_dim > 0) {
        x = gelu(linear(x, "head.intermediate"));
      }
      trace.logits = linear(x, "head.output");
      break;
    }
    case HeadKind::sequence_classification: {
      std::vector<int> cls_row = {0};
      Tensor pooled = tanh_act(linear(select_rows(h, cls_row), "head.pooler"));
      trace.logits = linear(pooled, "head.output");
      break;
    }
    case HeadKind::span_extraction:
      trace.logits = linear(h, "head.span");
      break;
  }
  return trace;
}

Model init_student_from_teacher(const Model& teacher, int lrf, const VocabMap& vmap) {
  const ModelConfig& tc = teacher.config;
  if (lrf < 1 || tc.num_layers % lrf != 0) {
    throw ConfigError("layer reduction factor " + std::to_string(lrf) +
                      " does not divide " + std::to_string(tc.num_layers) + " layers");
  }
  if (vmap.old_size != tc.vocab_size) {
    throw ContractError("vocab map built for size " + std::to_string(vmap.old_size) +
                        ", teacher has " + std::to_string(tc.vocab_size));
  }

  Model student;
  student.config = tc;
  student.config.num_layers = tc.num_layers / lrf;
  student.head = teacher.head.kind == HeadKind::mlm ? teacher.head : TaskHead{};

  auto copy_param = [&](const std::string& from, const std::string& to) {
    Tensor t = param(teacher, from).detached_clone();
    t.set_requires_grad(true);
    student.params.emplace(to, std::move(t));
  };

  copy_param("embeddings.token", "embeddings.token");
  copy_param("embeddings.position", "embeddings.position");
  for (int sj = 0; sj < student.config.num_layers; ++sj) {
    // 1-based student layer sj+1 draws teacher layer (sj+1)*lrf.
    const int tj = (sj + 1) * lrf - 1;
    const std::string from = layer_prefix(tj);
    const std::string to = layer_prefix(sj);
    for (const char* leaf :
         {"attention.query.weight", "attention.query.bias", "attention.key.weight",
          "attention.key.bias", "attention.value.weight", "attention.value.bias",
          "attention.output.weight", "attention.output.bias",
          "attention.layernorm.gain", "attention.layernorm.bias",
          "ffn.intermediate.weight", "ffn.intermediate.bias", "ffn.output.weight",
          "ffn.output.bias", "ffn.layernorm.gain", "ffn.layernorm.bias"}) {
      copy_param(from + leaf, to + leaf);
    }
  }
  if (student.head.kind == HeadKind::mlm) {
    for (const char* name : {"mlm.transform.weight", "mlm.transform.bias",
                             "mlm.transform.layernorm.gain",
                             "mlm.transform.layernorm.bias", "mlm.output_bias"}) {
      copy_param(name, name);
    }
  }
  return slice_embeddings(student, vmap);
}

Model slice_embeddings(const Model& model, const VocabMap& map) {
  if (map.old_size != model.config.vocab_size) {
    throw ContractError("slice_embeddings: map covers " + std::to_string(map.old_size) +
                        " ids, model vocabulary is " +
                        std::to_string(model.config.vocab_size));
  }
  for (int old_id : map.kept) {
    if (old_id < 0 || old_id >= model.config.vocab_size) {
      throw ContractError("slice_embeddings: kept id " + std::to_string(old_id) +
                          " out of range");
    }
  }

  Model sliced;
  sliced.config = model.config;
  sliced.config.vocab_size = map.new_size();
  sliced.head = model.head;

  const int d = model.config.hidden_dim;
  for (const auto& [name, tensor] : model.params) {
    if (name == "embeddings.token") {
      Tensor rows = Tensor::zeros({map.new_size(), d});
      const float* src = tensor.data().data();
      float* dst = rows.data().data();
      for (std::size_t n = 0; n < map.kept.size(); ++n) {
        const float* from = src + static_cast<std::size_t>(map.kept[n]) * d;
        std::copy(from, from + d, dst + n * static_cast<std::size_t>(d));
      }
      rows.set_requires_grad(true);
      sliced.params.emplace(name, std::move(rows));
    } else if (name == "mlm.output_bias") {
      Tensor bias = Tensor::zeros({map.new_size()});
      auto src = tensor.data();
      auto dst = bias.data();
      for (std::size_t n = 0; n < map.kept.size(); ++n) {
        dst[n] = src[static_cast<std::size_t>(map.kept[n])];
      }
      bias.set_requires_grad(true);
      sliced.params.emplace(name, std::move(bias));
    } else {
      Tensor copy = tensor.detached_clone();
      copy.set_requires_grad(true);
      sliced.params.emplace(name, std::move(copy));
    }
  }
  return sliced;
}

Model clone_model(const Model& model) {
  Model copy;
  copy.config = model.config;
  copy.head = model.head;
  for (const auto& [name, tensor] : model.params) {
    Tensor t = tensor.detached_clone();
    t.set_requires_grad(true);
    copy.params.emplace(name, std::move(t));
  }
  return copy;
}

Model with_head(const Model& base, const TaskHead& head, const ParamMap& head_params) {
  validate_head(head);
  Model out;
  out.config = base.config;
  out.head = head;
  for (const auto& [name, shape] : param_specs(out.config, head)) {
    const bool from_head = name.rfind("head.", 0) == 0 || name.rfind("mlm.", 0) == 0;
    const ParamMap& source = from_head ? head_params : base.params;
    const auto it = source.find(name);
    if (it == source.end()) {
      throw ContractError("missing parameter " + name + " for head swap");
    }
    if (it->second.shape() != shape) {
      throw ContractError("shape mismatch for " + name + " in head swap");
    }
    Tensor t = it->second.detached_clone();
    t.set_requires_grad(true);
    out.params.emplace(name, std::move(t));
  }
  return out;
}

std::int64_t count_params(const Model& model) {
  std::int64_t total = 0;
  for (const auto& [name, tensor] : model.params) {
    (void)name;
    total += tensor.numel();
  }
  return total;
}

std::int64_t count_flops(const ModelConfig& config, const TaskHead& head, int seq_len) {
  validate_config(config);
  validate_head(head);
  if (seq_len < 1 || seq_len > config.max_seq_len) {
    throw ContractError("count_flops: seq_len " + std::to_string(seq_len) +
                        " outside [1," + std::to_string(config.max_seq_len) + "]");
  }
  const std::int64_t l = seq_len;
  const std::int64_t d = config.hidden_dim;
  const std::int64_t ffn = config.ffn_dim;
  const std::int64_t v = config.vocab_size;

  const std::int64_t per_layer = 2 * (4 * l * d * d + 2 * l * l * d + 2 * l * d * ffn);
  std::int64_t total = config.num_layers * per_layer + 2 * l * d;

  switch (head.kind) {
    case HeadKind::none:
      break;
    case HeadKind::mlm:
      total += 2 * l * d * d + 2 * l * d * v;
      break;
    case HeadKind::token_classification: {
      const std::int64_t labels = head.num_labels;
      if (head.intermediate_dim > 0) {
        const std::int64_t mid = head.intermediate_dim;
        total += 2 * l * d * mid + 2 * l * mid * labels;
      } else {
        total += 2 * l * d * labels;
      }
      break;
    }
    case HeadKind::sequence_classification:
      total += 2 * d * d + 2 * d * head.num_labels;
      break;
    case HeadKind::span_extraction:
      total += 2 * l * d * 2;
      break;
  }
  return total;
}

std::uint64_t fingerprint(const Model& model) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV offset basis
  auto mix_bytes = [&h](const void* ptr, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(ptr);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;  // FNV prime
    }
  };
  const int kind = static_cast<int>(model.head.kind);
  mix_bytes(&kind, sizeof(kind));
  mix_bytes(&model.head.num_labels, sizeof(model.head.num_labels));
  for (const auto& [name, tensor] : model.params) {
    mix_bytes(name.data(), name.size());
    for (int dim : tensor.shape()) mix_bytes(&dim, sizeof(dim));
    auto data = tensor.data();
    mix_bytes(data.data(), data.size() * sizeof(float));
  }
  return h;
}

}  // namespace bistil

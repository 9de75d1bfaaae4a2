// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bistil/model.hpp"

namespace bistil {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string shape_field(const std::vector<int>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out.push_back(',');
    out += std::to_string(shape[i]);
  }
  return out;
}

std::vector<int> parse_shape_field(const std::string& field, const std::string& where) {
  std::vector<int> shape;
  std::stringstream ss(field);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      shape.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw ParseError(where + ": bad shape field '" + field + "'");
    }
  }
  if (shape.empty()) throw ParseError(where + ": empty shape field");
  return shape;
}

}  // namespace

void save_checkpoint(const Model& model, const Vocabulary& vocab,
                     const std::string& dir) {
  if (vocab.size() != model.config.vocab_size) {
    throw ContractError("save_checkpoint: vocabulary size " +
                        std::to_string(vocab.size()) + " != model vocab_size " +
                        std::to_string(model.config.vocab_size));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir);

  const fs::path root(dir);
  {
    std::ofstream manifest(root / "manifest.tsv", std::ios::binary);
    std::ofstream weights(root / "weights.bin", std::ios::binary);
    if (!manifest || !weights) {
      throw IoError("cannot open checkpoint files under " + dir);
    }
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : model.params) {
      manifest << name << "\tf32\t" << shape_field(tensor.shape()) << '\t' << offset
               << '\n';
      auto data = tensor.data();
      weights.write(reinterpret_cast<const char*>(data.data()),
                    static_cast<std::streamsize>(data.size() * sizeof(float)));
      offset += data.size() * sizeof(float);
    }
    if (!manifest || !weights) throw IoError("short write under " + dir);
  }
  save_vocabulary(vocab, (root / "vocab.txt").string());

  json config;
  config["num_layers"] = model.config.num_layers;
  config["hidden_dim"] = model.config.hidden_dim;
  config["num_heads"] = model.config.num_heads;
  config["ffn_dim"] = model.config.ffn_dim;
  config["vocab_size"] = model.config.vocab_size;
  config["max_seq_len"] = model.config.max_seq_len;
  config["dropout"] = model.config.dropout;
  config["head_kind"] = head_kind_name(model.head.kind);
  config["head_num_labels"] = model.head.num_labels;
  config["head_intermediate_dim"] = model.head.intermediate_dim;
  std::ofstream out(root / "config.json", std::ios::binary);
  if (!out) throw IoError("cannot write config.json under " + dir);
  out << config.dump(2) << '\n';
  if (!out) throw IoError("short write to config.json under " + dir);
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "config.json")) {
    throw IoError("checkpoint directory " + dir + " has no config.json");
  }

  json config;
  {
    std::ifstream in(root / "config.json", std::ios::binary);
    if (!in) throw IoError("cannot read config.json under " + dir);
    try {
      in >> config;
    } catch (const json::exception& e) {
      throw ParseError("config.json under " + dir + ": " + e.what());
    }
  }

  Model model;
  try {
    model.config.num_layers = config.at("num_layers").get<int>();
    model.config.hidden_dim = config.at("hidden_dim").get<int>();
    model.config.num_heads = config.at("num_heads").get<int>();
    model.config.ffn_dim = config.at("ffn_dim").get<int>();
    model.config.vocab_size = config.at("vocab_size").get<int>();
    model.config.max_seq_len = config.at("max_seq_len").get<int>();
    model.config.dropout = config.at("dropout").get<float>();
    model.head.kind = head_kind_from_name(config.at("head_kind").get<std::string>());
    model.head.num_labels = config.at("head_num_labels").get<int>();
    model.head.intermediate_dim = config.at("head_intermediate_dim").get<int>();
  } catch (const json::exception& e) {
    throw ParseError("config.json under " + dir + ": " + e.what());
  }
  validate_config(model.config);

  // Manifest rows, validated against the parameter set this config implies.
  const auto expected = parameter_shapes(model.config, model.head);
  std::ifstream manifest(root / "manifest.tsv", std::ios::binary);
  if (!manifest) throw IoError("cannot read manifest.tsv under " + dir);
  std::ifstream weights(root / "weights.bin", std::ios::binary);
  if (!weights) throw IoError("cannot read weights.bin under " + dir);

  std::string line;
  std::size_t row = 0;
  std::uint64_t expected_offset = 0;
  while (std::getline(manifest, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "manifest.tsv row " + std::to_string(row + 1);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4) throw ParseError(where + ": want 4 tab-separated fields");
    if (fields[1] != "f32") throw ParseError(where + ": unsupported dtype " + fields[1]);
    if (row >= expected.size()) {
      throw DataError("manifest.tsv under " + dir + " lists extra parameters");
    }
    if (fields[0] != expected[row].first) {
      throw DataError(where + ": parameter '" + fields[0] + "', expected '" +
                      expected[row].first + "'");
    }
    std::uint64_t offset = 0;
    try {
      offset = std::stoull(fields[3]);
    } catch (const std::exception&) {
      throw ParseError(where + ": bad byte offset '" + fields[3] + "'");
    }
    if (offset != expected_offset) {
      throw DataError(where + ": byte offset " + std::to_string(offset) +
                      ", expected " + std::to_string(expected_offset));
    }
    std::vector<int> shape = parse_shape_field(fields[2], where);
    if (shape != expected[row].second) {
      throw DataError(where + ": shape " + shape_string(shape) +
                      ", config implies " + shape_string(expected[row].second));
    }
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    auto data = t.data();
    weights.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (weights.gcount() !=
        static_cast<std::streamsize>(data.size() * sizeof(float))) {
      throw DataError("weights.bin under " + dir + " truncated at parameter " +
                      fields[0]);
    }
    expected_offset += data.size() * sizeof(float);
    model.params.emplace(fields[0], std::move(t));
    ++row;
  }
  if (row != expected.size()) {
    throw DataError("manifest.tsv under " + dir + " lists " + std::to_string(row) +
                    " parameters, config implies " + std::to_string(expected.size()));
  }
  weights.peek();
  if (!weights.eof()) {
    throw DataError("weights.bin under " + dir + " holds trailing bytes");
  }

  Vocabulary vocab = load_vocabulary((root / "vocab.txt").string());
  if (vocab.size() != model.config.vocab_size) {
    throw DataError("vocab.txt under " + dir + " holds " +
                    std::to_string(vocab.size()) + " tokens, config says " +
                    std::to_string(model.config.vocab_size));
  }
  return Checkpoint{std::move(model), std::move(vocab)};
}

}  // namespace bistil

// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/sft.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <tuple>

#include "bistil/errors.hpp"

namespace bistil {
namespace {

bool is_head_param(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.rfind("mlm.", 0) == 0;
}

using Snapshot = std::map<std::string, std::vector<float>>;

Snapshot snapshot_params(const Model& model) {
  Snapshot snap;
  for (const auto& [name, tensor] : model.params) {
    auto data = tensor.data();
    snap.emplace(name, std::vector<float>(data.begin(), data.end()));
  }
  return snap;
}

void restore_params(Model& model, const Snapshot& snap,
                    const std::function<bool(const std::string&)>& select) {
  for (auto& [name, tensor] : model.params) {
    if (select && !select(name)) continue;
    const auto& src = snap.at(name);
    auto dst = tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::int64_t budget_size(double k, std::int64_t n_eligible) {
  // Products that are integral in real arithmetic (0.08 * 200, or a density
  // that arrived through a float) must not round up through representation
  // noise, so near-integers snap to the integer before the ceiling.
  const double product = k * static_cast<double>(n_eligible);
  const double nearest = std::round(product);
  const double tolerance = 1e-6 * std::max(1.0, product);
  const auto n = std::fabs(product - nearest) <= tolerance
                     ? static_cast<std::int64_t>(nearest)
                     : static_cast<std::int64_t>(std::ceil(product));
  return std::clamp<std::int64_t>(n, 1, n_eligible);
}

}  // namespace

std::int64_t SftDelta::nnz() const {
  std::int64_t total = 0;
  for (const auto& [name, pairs] : entries) {
    (void)name;
    total += static_cast<std::int64_t>(pairs.size());
  }
  return total;
}

bool default_eligible(const std::string& name) { return !is_head_param(name); }

MaskMap select_topk_mask(const ParamMap& theta0, const ParamMap& theta_dense,
                         double k, const EligiblePredicate& eligible) {
  if (!(k > 0.0) || k > 1.0) {
    throw ContractError("density must be in (0, 1], got " + std::to_string(k));
  }
  if (!eligible) throw ContractError("eligible predicate must be set");
  if (theta0.size() != theta_dense.size()) {
    throw ContractError("parameter sets differ in size");
  }

  struct Entry {
    float neg_abs;
    std::uint32_t param;
    std::uint64_t index;
  };
  std::vector<const std::string*> names;
  std::vector<Entry> entries;
  MaskMap mask;

  std::uint32_t ordinal = 0;
  for (const auto& [name, t0] : theta0) {
    auto it = theta_dense.find(name);
    if (it == theta_dense.end()) {
      throw ContractError("parameter " + name + " missing from dense set");
    }
    if (it->second.shape() != t0.shape()) {
      throw ContractError("shape mismatch for " + name);
    }
    mask.emplace(name, std::vector<std::uint8_t>(static_cast<std::size_t>(t0.numel()), 0));
    if (eligible(name)) {
      auto before = t0.data();
      auto after = it->second.data();
      names.push_back(&name);
      for (std::size_t i = 0; i < before.size(); ++i) {
        entries.push_back({-std::fabs(after[i] - before[i]), ordinal,
                           static_cast<std::uint64_t>(i)});
      }
      ++ordinal;
    }
  }
  if (entries.empty()) throw DomainError("no eligible parameters");

  const std::int64_t n_true = budget_size(k, static_cast<std::int64_t>(entries.size()));
  std::sort(entries.begin(), entries.end(), [&](const Entry& a, const Entry& b) {
    if (a.neg_abs != b.neg_abs) return a.neg_abs < b.neg_abs;
    if (a.param != b.param) return *names[a.param] < *names[b.param];
    return a.index < b.index;
  });
  for (std::int64_t n = 0; n < n_true; ++n) {
    const Entry& e = entries[static_cast<std::size_t>(n)];
    mask.at(*names[e.param])[static_cast<std::size_t>(e.index)] = 1;
  }
  return mask;
}

SftResult lt_sft_train(const Model& base, const SftHooks& hooks,
                       const SftConfig& config, Rng& rng) {
  if (!hooks.step_loss) throw ContractError("step_loss hook is required");
  if (hooks.num_examples <= 0) throw DomainError("training set is empty");
  if (!(config.density > 0.0f) || config.density > 1.0f) {
    throw ConfigError("density must be in (0, 1]");
  }
  if (config.dense_steps < 1) throw ConfigError("dense_steps must be >= 1");
  if (config.sparse_steps < 0) throw ConfigError("sparse_steps must be >= 0");
  if (config.eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (!config.eligible) throw ConfigError("eligible predicate must be set");

  Model model = clone_model(base);
  const std::uint64_t base_fp = fingerprint(base);
  const Snapshot theta0 = snapshot_params(model);

  auto observe = [&](const char* phase) {
    if (hooks.phase_observer) hooks.phase_observer(phase, model);
  };

  // Runs `steps` optimizer steps on `model` under `opt_mask`, then restores
  // the lowest-validation-loss checkpoint among those evaluated every
  // eval_interval steps (the final step always gets evaluated).
  auto run_phase = [&](const char* phase, int steps, const MaskMap& opt_mask) {
    AdamWConfig adamw;
    adamw.lr = config.lr;
    adamw.weight_decay = config.weight_decay;
    adamw.total_steps = steps;
    OptimizerState opt = make_optimizer(adamw);
    double best = std::numeric_limits<double>::infinity();
    Snapshot best_params;
    bool have_best = false;
    for (int step = 0; step < steps; ++step) {
      zero_gradients(model.params);
      Tensor loss = hooks.step_loss(model, rng, step);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingError(std::string(phase) + " loss is not finite at step " +
                            std::to_string(step));
      }
      backward(loss);
      adamw_step(opt, model.params, &opt_mask);
      const bool last = step + 1 == steps;
      if (hooks.validation && ((step + 1) % config.eval_interval == 0 || last)) {
        const double val = hooks.validation(model);
        if (!std::isfinite(val)) {
          throw TrainingError(std::string(phase) +
                              " validation loss is not finite at step " +
                              std::to_string(step));
        }
        if (!have_best || val < best) {
          best = val;
          best_params = snapshot_params(model);
          have_best = true;
        }
      }
    }
    if (have_best) restore_params(model, best_params, nullptr);
    return have_best ? best : 0.0;
  };

  MaskMap dense_mask;
  for (const auto& [name, tensor] : model.params) {
    if (config.eligible(name) || is_head_param(name)) {
      dense_mask.emplace(name,
                         std::vector<std::uint8_t>(static_cast<std::size_t>(tensor.numel()), 1));
    }
  }

  observe("dense_start");
  double best_val = run_phase("dense", config.dense_steps, dense_mask);

  SftResult result;
  result.mask = select_topk_mask(base.params, model.params,
                                 static_cast<double>(config.density), config.eligible);

  if (config.sparse_steps > 0) {
    // Rewind everything but the head to theta_0; the head trains through
    // both phases without interruption.
    restore_params(model, theta0,
                   [](const std::string& name) { return !is_head_param(name); });

    MaskMap sparse_mask = result.mask;
    if (config.train_head_dense) {
      for (const auto& [name, tensor] : model.params) {
        if (is_head_param(name)) {
          sparse_mask[name].assign(static_cast<std::size_t>(tensor.numel()), 1);
        }
      }
    }
    observe("sparse_start");
    best_val = run_phase("sparse", config.sparse_steps, sparse_mask);
  }
  observe("sparse_end");

  result.best_validation = best_val;
  result.delta.base_fingerprint = base_fp;
  result.delta.density = config.density;
  for (const auto& [name, row] : result.mask) {
    const auto& before = theta0.at(name);
    auto after = model.params.at(name).data();
    std::vector<std::pair<std::uint64_t, float>> pairs;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (!row[i]) continue;
      const float diff = after[i] - before[i];
      if (diff != 0.0f) pairs.emplace_back(static_cast<std::uint64_t>(i), diff);
    }
    if (!pairs.empty()) result.delta.entries.emplace(name, std::move(pairs));
  }
  for (const auto& [name, tensor] : model.params) {
    if (!is_head_param(name)) continue;
    Tensor copy = tensor.detached_clone();
    copy.set_requires_grad(true);
    result.head_params.emplace(name, std::move(copy));
  }
  return result;
}

Model apply_deltas(const Model& base, const std::vector<SftDelta>& deltas,
                   bool allow_fingerprint_mismatch) {
  const std::uint64_t fp = fingerprint(base);
  for (std::size_t d = 0; d < deltas.size(); ++d) {
    if (!allow_fingerprint_mismatch && deltas[d].base_fingerprint != fp) {
      throw CompositionError("delta " + std::to_string(d) +
                             " was extracted against a different base model");
    }
  }

  Model out = clone_model(base);
  std::map<std::string, std::vector<float>> acc;
  std::map<std::string, std::vector<std::uint8_t>> touched;
  for (const auto& delta : deltas) {
    for (const auto& [name, pairs] : delta.entries) {
      auto it = out.params.find(name);
      if (it == out.params.end()) {
        throw ContractError("delta names unknown parameter " + name);
      }
      const auto numel = static_cast<std::uint64_t>(it->second.numel());
      auto& sums = acc[name];
      if (sums.empty()) {
        sums.assign(static_cast<std::size_t>(numel), 0.0f);
        touched[name].assign(static_cast<std::size_t>(numel), 0);
      }
      std::uint64_t prev = 0;
      bool first = true;
      for (const auto& [index, value] : pairs) {
        if (index >= numel) {
          throw ContractError("delta index " + std::to_string(index) +
                              " out of range for " + name);
        }
        if (!first && index <= prev) {
          throw ContractError("delta indices must be strictly increasing for " + name);
        }
        prev = index;
        first = false;
        sums[static_cast<std::size_t>(index)] += value;
        touched[name][static_cast<std::size_t>(index)] = 1;
      }
    }
  }
  for (const auto& [name, sums] : acc) {
    auto dst = out.params.at(name).data();
    const auto& hit = touched.at(name);
    for (std::size_t i = 0; i < sums.size(); ++i) {
      if (hit[i]) dst[i] += sums[i];
    }
  }
  return out;
}

void save_delta(const SftDelta& delta, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  std::ofstream manifest(dir + "/delta.manifest.tsv");
  std::ofstream bin(dir + "/delta.bin", std::ios::binary);
  if (!manifest || !bin) throw IoError("cannot open delta files under " + dir);

  char line[64];
  std::snprintf(line, sizeof line, "%.9g", static_cast<double>(delta.density));
  manifest << "#density\t" << line << "\n";
  std::snprintf(line, sizeof line, "%016llx",
                static_cast<unsigned long long>(delta.base_fingerprint));
  manifest << "#base_fingerprint\t" << line << "\n";

  for (const auto& [name, pairs] : delta.entries) {
    manifest << name << "\t" << pairs.size() << "\n";
    std::vector<std::uint64_t> indices;
    std::vector<float> values;
    indices.reserve(pairs.size());
    values.reserve(pairs.size());
    for (const auto& [index, value] : pairs) {
      indices.push_back(index);
      values.push_back(value);
    }
    bin.write(reinterpret_cast<const char*>(indices.data()),
              static_cast<std::streamsize>(indices.size() * sizeof(std::uint64_t)));
    bin.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
  if (!manifest || !bin) throw IoError("short write under " + dir);
}

SftDelta load_delta(const std::string& dir) {
  std::ifstream manifest(dir + "/delta.manifest.tsv");
  if (!manifest) throw IoError("cannot open " + dir + "/delta.manifest.tsv");
  std::ifstream bin(dir + "/delta.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + dir + "/delta.bin");

  SftDelta delta;
  bool saw_density = false;
  bool saw_fingerprint = false;
  std::string line;
  int lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw ParseError("empty line " + std::to_string(lineno) + " in delta manifest");
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError("expected two tab-separated fields at delta manifest line " +
                       std::to_string(lineno));
    }
    const std::string key = line.substr(0, tab);
    const std::string value = line.substr(tab + 1);
    try {
      if (key == "#density") {
        delta.density = std::stof(value);
        saw_density = true;
        continue;
      }
      if (key == "#base_fingerprint") {
        delta.base_fingerprint = std::stoull(value, nullptr, 16);
        saw_fingerprint = true;
        continue;
      }
      if (!key.empty() && key[0] == '#') {
        throw ParseError("unknown header " + key + " in delta manifest");
      }
      const auto count = std::stoull(value);
      if (delta.entries.count(key)) {
        throw DataError("duplicate tensor " + key + " in delta manifest");
      }
      std::vector<std::uint64_t> indices(count);
      std::vector<float> values(count);
      bin.read(reinterpret_cast<char*>(indices.data()),
               static_cast<std::streamsize>(count * sizeof(std::uint64_t)));
      bin.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(count * sizeof(float)));
      if (!bin) throw DataError("delta.bin is truncated at tensor " + key);
      std::vector<std::pair<std::uint64_t, float>> pairs;
      pairs.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        if (i > 0 && indices[i] <= indices[i - 1]) {
          throw DataError("indices for " + key + " are not strictly increasing");
        }
        pairs.emplace_back(indices[i], values[i]);
      }
      delta.entries.emplace(key, std::move(pairs));
    } catch (const std::invalid_argument&) {
      throw ParseError("bad number at delta manifest line " + std::to_string(lineno));
    } catch (const std::out_of_range&) {
      throw ParseError("number out of range at delta manifest line " + std::to_string(lineno));
    }
  }
  if (!saw_density || !saw_fingerprint) {
    throw ParseError("delta manifest is missing its header lines");
  }
  bin.peek();
  if (!bin.eof()) throw DataError("delta.bin has trailing bytes");
  return delta;
}

}  // namespace bistil

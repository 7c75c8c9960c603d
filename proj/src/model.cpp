// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace mergeforge {

using json = nlohmann::json;

void TransformerConfig::validate() const {
  if (vocab_size == 0 || model_dim == 0 || layers == 0 || heads == 0 || mlp_dim == 0 || max_seq_len == 0) {
    throw ConfigError("transformer config extents must all be >= 1");
  }
  if (model_dim % heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (!(rmsnorm_eps >= 0.0) || !std::isfinite(rmsnorm_eps)) throw ConfigError("rmsnorm_eps must be finite and >= 0");
}

void to_json(json& j, const TransformerConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"layers", c.layers},
           {"heads", c.heads},           {"mlp_dim", c.mlp_dim},     {"max_seq_len", c.max_seq_len},
           {"rmsnorm_eps", c.rmsnorm_eps}};
}

void from_json(const json& j, TransformerConfig& c) {
  TransformerConfig d;
  try {
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.model_dim = j.value("model_dim", d.model_dim);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.rmsnorm_eps = j.value("rmsnorm_eps", d.rmsnorm_eps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
}

void attach_config(WeightMap& weights, const TransformerConfig& config) {
  weights.metadata[kConfigMetadataKey] = json(config).dump();
}

std::optional<TransformerConfig> config_from_metadata(const WeightMap& weights) {
  auto it = weights.metadata.find(kConfigMetadataKey);
  if (it == weights.metadata.end()) return std::nullopt;
  try {
    return json::parse(it->second).get<TransformerConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model config in checkpoint metadata: ") + e.what());
  }
}

std::string to_string(MergeScope scope) { return scope == MergeScope::kAll ? "all" : "linear_only"; }

MergeScope parse_merge_scope(const std::string& text) {
  if (text == "linear_only") return MergeScope::kLinearOnly;
  if (text == "all") return MergeScope::kAll;
  throw ConfigError("unknown merge_scope '" + text + "' (expected linear_only or all)");
}

bool is_linear_name(std::string_view name) {
  return name == "lm_head" || name.find(".attn.") != std::string_view::npos ||
         name.find(".mlp.") != std::string_view::npos;
}

bool in_scope(std::string_view name, MergeScope scope) { return scope == MergeScope::kAll || is_linear_name(name); }

std::optional<std::size_t> block_index(std::string_view name) {
  constexpr std::string_view prefix = "layers.";
  if (name.substr(0, prefix.size()) != prefix) return std::nullopt;
  const char* begin = name.data() + prefix.size();
  const char* end = name.data() + name.size();
  std::size_t index = 0;
  auto [ptr, ec] = std::from_chars(begin, end, index);
  if (ec != std::errc() || ptr == begin || ptr == end || *ptr != '.') return std::nullopt;
  return index;
}

std::vector<std::pair<std::string, Shape>> schema(const TransformerConfig& c) {
  const std::size_t v = c.vocab_size, d = c.model_dim, f = c.mlp_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.tok", Shape{v, d});
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm.g", Shape{d});
    for (const char* w : {"q", "k", "v", "o"}) out.emplace_back(p + "attn." + w, Shape{d, d});
    out.emplace_back(p + "mlp_norm.g", Shape{d});
    out.emplace_back(p + "mlp.gate", Shape{f, d});
    out.emplace_back(p + "mlp.up", Shape{f, d});
    out.emplace_back(p + "mlp.down", Shape{d, f});
  }
  out.emplace_back("final_norm.g", Shape{d});
  out.emplace_back("lm_head", Shape{v, d});
  return out;
}

void validate_schema(const WeightMap& weights, const TransformerConfig& config) {
  const auto expected = schema(config);
  std::set<std::string> names;
  for (const auto& [name, shape] : expected) {
    names.insert(name);
    auto it = weights.tensors.find(name);
    if (it == weights.tensors.end()) throw ShapeError("schema violation: missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("schema violation: tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(shape));
    }
  }
  for (const auto& [name, tensor] : weights.tensors) {
    if (!names.count(name)) throw ShapeError("schema violation: unexpected tensor '" + name + "'");
  }
}

std::vector<std::int64_t> TokenBatch::flat_ids() const {
  std::vector<std::int64_t> out;
  out.reserve(batch_size() * seq_len());
  for (const auto& s : sequences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<std::int64_t> TokenBatch::next_token_targets() const {
  std::vector<std::int64_t> out;
  out.reserve(batch_size() * seq_len());
  for (const auto& s : sequences) {
    for (std::size_t t = 0; t < s.size(); ++t) out.push_back(t + 1 < s.size() ? s[t + 1] : -1);
  }
  return out;
}

void validate_batch(const TokenBatch& batch, const TransformerConfig& config) {
  if (batch.sequences.empty() || batch.seq_len() == 0) throw ShapeError("token batch is empty");
  const std::size_t len = batch.seq_len();
  if (len > config.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (const auto& s : batch.sequences) {
    if (s.size() != len) throw ShapeError("token batch has sequences of different lengths");
    for (std::int64_t id : s) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw ShapeError("token id " + std::to_string(id) + " out of range [0, " + std::to_string(config.vocab_size) + ")");
      }
    }
  }
}

std::vector<TokenBatch> read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::vector<TokenBatch> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json rec = json::parse(line);
      TokenBatch b;
      b.sequences.push_back(rec.at("ids").get<std::vector<std::int64_t>>());
      b.affinity = rec.value("affinity", std::size_t{0});
      out.push_back(std::move(b));
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset_jsonl(const std::filesystem::path& path, std::span<const TokenBatch> batches) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const TokenBatch& b : batches) {
    for (const auto& s : b.sequences) out << json{{"ids", s}, {"affinity", b.affinity}}.dump() << "\n";
  }
}

WeightMap init_model(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  WeightMap out;
  for (const auto& [name, shape] : schema(config)) {
    Tensor t(shape, 1.0f);
    if (shape.size() == 2) {
      // Linear layers use std 1/sqrt(fan_in). The head is drawn at half that
      // scale so an untrained model's predictions start close to uniform.
      double std = name == "embed.tok" ? 1.0 : 1.0 / std::sqrt(double(shape[1]));
      if (name == "lm_head") std *= 0.5;
      std::normal_distribution<double> dist(0.0, std);
      for (float& v : t.storage()) v = static_cast<float>(dist(rng));
    }
    out.tensors.emplace(name, std::move(t));
  }
  attach_config(out, config);
  return out;
}

Tensor forward(const WeightMap& weights, const TransformerConfig& config, const TokenBatch& batch) {
  auto params = frozen_params<float>(weights);
  Tape<float> tape;
  return forward<float>(tape, params, config, batch).value();
}

double cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  const std::size_t rows = logits.rows(), cols = logits.last_dim();
  if (targets.size() != rows) throw ShapeError("cross_entropy: target count does not match logit rows");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= cols) throw ShapeError("cross_entropy: target out of range");
    const float* x = &logits[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(double(x[j]) - mx);
    total += mx + std::log(z) - double(x[targets[r]]);
    ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: no targets");
  return total / double(count);
}

double mean_next_token_loss(const WeightMap& weights, const TransformerConfig& config,
                            std::span<const TokenBatch> batches) {
  if (batches.empty()) throw ShapeError("mean_next_token_loss: no batches");
  auto params = frozen_params<float>(weights);
  double total = 0.0;
  std::size_t count = 0;
  for (const TokenBatch& b : batches) {
    Tape<float> tape;
    const Tensor logits = forward<float>(tape, params, config, b).value();
    const auto targets = b.next_token_targets();
    const auto n = static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](auto t) { return t >= 0; }));
    if (n == 0) continue;
    total += cross_entropy(logits, targets) * double(n);
    count += n;
  }
  if (count == 0) throw ShapeError("mean_next_token_loss: batches have no predicted positions");
  return total / double(count);
}

ExpertTrainResult train_expert(const WeightMap& base, const TransformerConfig& config,
                               std::span<const TokenBatch> dataset, const ExpertTrainOptions& options) {
  if (dataset.empty()) throw ConfigError("train_expert: dataset is empty");
  if (!(options.learning_rate > 0.0)) throw ConfigError("train_expert: learning_rate must be positive");
  validate_schema(base, config);
  ExpertTrainResult result;
  if (options.steps == 0) {
    result.weights = base;
    return result;
  }
  auto params = make_params<float>(base, [&](const std::string& name) { return in_scope(name, options.trainable); });
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < options.steps; ++step) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const TokenBatch& batch = dataset[order[cursor++]];
    Tape<float> tape;
    double value = 0.0;
    try {
      Var<float> loss = cross_entropy(forward<float>(tape, params, config, batch), batch.next_token_targets());
      value = loss.value().item();
      if (!std::isfinite(value)) throw NumericError("non-finite loss");
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("train_expert diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.losses.push_back(value);
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        p.value[i] -= static_cast<float>(options.learning_rate * double(p.grad[i]));
      }
      p.zero_grad();
      if (!p.value.all_finite()) {
        throw NumericError("train_expert diverged at step " + std::to_string(step) + " in tensor '" + name + "'");
      }
    }
  }
  result.weights.metadata = base.metadata;
  for (auto& [name, p] : params) result.weights.tensors.emplace(name, std::move(p.value));
  return result;
}

}  // namespace mergeforge

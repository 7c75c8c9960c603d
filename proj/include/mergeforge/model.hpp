// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only transformer: token embedding, pre-norm blocks with
// causal multi-head attention and a gated SiLU MLP, final RMSNorm and an
// untied LM head. There is no positional encoding; order enters only
// through the causal mask.
//
// Tensor names:
//   embed.tok                 [V, d]
//   layers.{i}.attn_norm.g    [d]
//   layers.{i}.attn.{q,k,v,o} [d, d]
//   layers.{i}.mlp_norm.g     [d]
//   layers.{i}.mlp.{gate,up}  [f, d]
//   layers.{i}.mlp.down       [d, f]
//   final_norm.g              [d]
//   lm_head                   [V, d]
// Linear weights are stored [out, in].

#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergeforge/autodiff.hpp"
#include "mergeforge/checkpoint.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

struct TransformerConfig {
  std::size_t vocab_size = 64;
  std::size_t model_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_dim = 64;
  std::size_t max_seq_len = 64;
  double rmsnorm_eps = 1e-5;

  void validate() const;
  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

// Checkpoints produced by this library carry their config under this
// metadata key as a JSON string.
inline constexpr const char* kConfigMetadataKey = "mergeforge.model_config";
void attach_config(WeightMap& weights, const TransformerConfig& config);
std::optional<TransformerConfig> config_from_metadata(const WeightMap& weights);

// Which tensors a merge touches. Tensors outside the scope come from the base.
enum class MergeScope { kLinearOnly, kAll };

std::string to_string(MergeScope scope);
MergeScope parse_merge_scope(const std::string& text);

// True for attention/MLP projections and the LM head.
bool is_linear_name(std::string_view name);
bool in_scope(std::string_view name, MergeScope scope);
// Block index for "layers.{i}.*", nullopt for the embedding, final norm, head.
std::optional<std::size_t> block_index(std::string_view name);

std::vector<std::pair<std::string, Shape>> schema(const TransformerConfig& config);
// Throws ShapeError naming the first missing, extra or misshapen tensor.
void validate_schema(const WeightMap& weights, const TransformerConfig& config);

struct TokenBatch {
  std::vector<std::vector<std::int64_t>> sequences;
  std::size_t affinity = 0;

  std::size_t batch_size() const { return sequences.size(); }
  std::size_t seq_len() const { return sequences.empty() ? 0 : sequences.front().size(); }
  // Ids flattened row-major as [batch * seq_len].
  std::vector<std::int64_t> flat_ids() const;
  // Next-token targets aligned with flat_ids(); the last position of every
  // sequence has no target and is marked -1.
  std::vector<std::int64_t> next_token_targets() const;

  friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

// Throws ShapeError if sequences are empty, ragged, longer than max_seq_len,
// or contain ids outside [0, vocab_size).
void validate_batch(const TokenBatch& batch, const TransformerConfig& config);

// One JSON record per sequence: {"ids": [...], "affinity": k}.
std::vector<TokenBatch> read_dataset_jsonl(const std::filesystem::path& path);
void write_dataset_jsonl(const std::filesystem::path& path, std::span<const TokenBatch> batches);

WeightMap init_model(const TransformerConfig& config, std::uint64_t seed);

template <typename T>
using ModelParams = std::map<std::string, Parameter<T>>;

// Converts weights into parameters; tensors for which trainable(name) holds
// receive gradients.
template <typename T, typename Pred>
ModelParams<T> make_params(const WeightMap& weights, Pred trainable) {
  ModelParams<T> params;
  for (const auto& [name, tensor] : weights.tensors) {
    Parameter<T> p;
    p.value = tensor.template cast<T>();
    p.trainable = trainable(name);
    params.emplace(name, std::move(p));
  }
  return params;
}

template <typename T>
ModelParams<T> frozen_params(const WeightMap& weights) {
  return make_params<T>(weights, [](const std::string&) { return false; });
}

// Supplies the model's weights to forward(). Plain models read parameters;
// the DAM optimizer substitutes a source that merges several models on the
// fly.
template <typename S, typename T>
concept WeightSource = requires(S& s, Tape<T>& tape, const std::string& name, Var<T> x,
                                const std::vector<std::int64_t>& ids) {
  { s.embed(tape, ids) } -> std::same_as<Var<T>>;
  { s.vector(tape, name) } -> std::same_as<Var<T>>;
  { s.linear(tape, name, x) } -> std::same_as<Var<T>>;
};

template <typename T>
class ParamSource {
 public:
  explicit ParamSource(ModelParams<T>& params) : params_(params) {}

  Var<T> embed(Tape<T>& tape, const std::vector<std::int64_t>& ids) {
    return ad::gather_rows(tape.parameter(get("embed.tok")), ids);
  }
  Var<T> vector(Tape<T>& tape, const std::string& name) { return tape.parameter(get(name)); }
  Var<T> linear(Tape<T>& tape, const std::string& name, Var<T> x) {
    return ad::linear(x, tape.parameter(get(name)));
  }

 private:
  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("model is missing tensor '" + name + "'");
    return it->second;
  }
  ModelParams<T>& params_;
};

// Logits of shape [batch, seq_len, vocab].
template <typename T, WeightSource<T> Source>
Var<T> forward(Tape<T>& tape, Source& source, const TransformerConfig& config, const TokenBatch& batch) {
  validate_batch(batch, config);
  const std::size_t b = batch.batch_size(), s = batch.seq_len();
  Var<T> x = source.embed(tape, batch.flat_ids());
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    Var<T> h = ad::rms_norm(x, source.vector(tape, p + "attn_norm.g"), config.rmsnorm_eps);
    Var<T> q = source.linear(tape, p + "attn.q", h);
    Var<T> k = source.linear(tape, p + "attn.k", h);
    Var<T> v = source.linear(tape, p + "attn.v", h);
    Var<T> att = ad::causal_attention(q, k, v, b, s, config.heads);
    x = x + source.linear(tape, p + "attn.o", att);
    h = ad::rms_norm(x, source.vector(tape, p + "mlp_norm.g"), config.rmsnorm_eps);
    Var<T> gated = ad::silu(source.linear(tape, p + "mlp.gate", h)) * source.linear(tape, p + "mlp.up", h);
    x = x + source.linear(tape, p + "mlp.down", gated);
  }
  x = ad::rms_norm(x, source.vector(tape, "final_norm.g"), config.rmsnorm_eps);
  Var<T> logits = source.linear(tape, "lm_head", x);
  return ad::reshape(logits, {b, s, config.vocab_size});
}

template <typename T>
Var<T> forward(Tape<T>& tape, ModelParams<T>& params, const TransformerConfig& config, const TokenBatch& batch) {
  ParamSource<T> source(params);
  return forward<T>(tape, source, config, batch);
}

// Value-only forward pass in f32.
Tensor forward(const WeightMap& weights, const TransformerConfig& config, const TokenBatch& batch);

// Mean negative log-likelihood of targets under row-softmax(logits) over the
// rows whose target is non-negative.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::int64_t>& targets) {
  return ad::scale(ad::mean(ad::pick(ad::log_softmax(logits), targets)), -1.0);
}

// Same quantity on plain values, accumulated in double.
double cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

// Mean next-token cross-entropy over a set of batches (each batch weighted
// by its number of predicted positions).
double mean_next_token_loss(const WeightMap& weights, const TransformerConfig& config,
                            std::span<const TokenBatch> batches);

struct ExpertTrainOptions {
  std::size_t steps = 200;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  // Tensors updated during fine-tuning; the rest stay at their base values.
  MergeScope trainable = MergeScope::kAll;
};

struct ExpertTrainResult {
  WeightMap weights;
  // Cross-entropy at each step, measured before that step's update.
  std::vector<double> losses;
};

// Plain gradient descent on next-token cross-entropy, one dataset batch per
// step in a seeded per-epoch shuffle. The base is not modified.
ExpertTrainResult train_expert(const WeightMap& base, const TransformerConfig& config,
                               std::span<const TokenBatch> dataset, const ExpertTrainOptions& options);

}  // namespace mergeforge

// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable Adaptive Merging: one trainable coefficient per input
// column of every in-scope tensor and source model. The merged layer is
//
//   W = Σ_i W_i diag(c_i),   evaluated as   y = Σ_i W_i (c_i ⊙ x)
//
// so training never materializes merged weights; bake() does that once.
// Embeddings and norm gains (scope "all") scale their last axis the same way.
//
// Training runs in double. Coefficients are rounded to f32 when baked or
// saved, which keeps a uniform-initialized bake bit-identical to the soup.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/autodiff.hpp"
#include "mergeforge/checkpoint.hpp"
#include "mergeforge/model.hpp"

namespace mergeforge {

enum class DamLoss { kKl, kMse, kEntropy };
enum class DamOptimizer { kAdam, kSgd };
enum class DamInit { kUniform, kOnes, kRandom };
enum class KlDirection { kMergedFirst, kExpertFirst };

std::string to_string(DamLoss v);
std::string to_string(DamOptimizer v);
std::string to_string(DamInit v);
std::string to_string(KlDirection v);

// Penalty weights used when an objective row names a term without a value.
inline constexpr double kDefaultLambdaCosine = 0.01;
inline constexpr double kDefaultLambdaL1 = 1e-5;
inline constexpr double kDefaultLambdaL2 = 1e-4;

struct DamConfig {
  DamLoss loss = DamLoss::kKl;
  double lambda_cosine = 0.0;
  double lambda_l1 = 0.0;
  double lambda_l2 = 0.0;
  double learning_rate = 2e-3;
  std::size_t batch_size = 1;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  MergeScope merge_scope = MergeScope::kLinearOnly;
  DamOptimizer optimizer = DamOptimizer::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  DamInit init = DamInit::kUniform;
  double init_sigma = 0.01;  // kRandom: 1/N + sigma * N(0, 1)
  KlDirection kl_direction = KlDirection::kMergedFirst;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  // Batches per dataset in the fixed probe set scored before and after training.
  std::size_t probe_batches = 4;

  void validate() const;
  friend bool operator==(const DamConfig&, const DamConfig&) = default;
};

void to_json(nlohmann::json& j, const DamConfig& c);
// Accepts an "objective" shorthand such as "kl+cosine+reg" which sets the
// loss and turns on the named penalties at their default weights unless the
// weights are given explicitly.
void from_json(const nlohmann::json& j, DamConfig& c);

// Objective rows of the ablation grid, e.g. "kl+cosine".
const std::vector<std::string>& ablation_rows();
DamConfig apply_objective(DamConfig config, const std::string& objective);
// Canonical row name for a config: loss plus "+cosine" / "+reg".
std::string objective_name(const DamConfig& config);

template <typename T>
struct BasicCoefficientSet {
  std::size_t num_models = 0;
  // In-scope tensor name -> one coefficient vector per model, length equal to
  // the tensor's last extent.
  std::map<std::string, std::vector<Parameter<T>>> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, per_model] : layers) {
      for (const auto& p : per_model) n += p.value.size();
    }
    return n;
  }
  void zero_grad() {
    for (auto& [name, per_model] : layers) {
      for (auto& p : per_model) p.zero_grad();
    }
  }
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& [name, per_model] : layers) {
      for (auto& p : per_model) out.push_back(&p);
    }
    return out;
  }
};

using CoefficientSet = BasicCoefficientSet<double>;

// Coefficients for every in-scope tensor of `base`. Models must be
// compatible with base.
CoefficientSet init_coefficients(const WeightMap& base, std::span<const WeightMap> models, const DamConfig& config);
// One-hot selector: every vector of model k is 1, the rest 0.
CoefficientSet selector_coefficients(const WeightMap& base, std::size_t num_models, std::size_t k, MergeScope scope);

// Source models held as frozen parameters in the training precision.
template <typename T>
struct MergeInputs {
  ModelParams<T> base;
  std::vector<ModelParams<T>> models;
};

template <typename T>
MergeInputs<T> make_merge_inputs(const WeightMap& base, std::span<const WeightMap> models) {
  std::vector<WeightMap> all(models.begin(), models.end());
  all.push_back(base);
  require_compatible(all);
  MergeInputs<T> in;
  in.base = frozen_params<T>(base);
  for (const WeightMap& m : models) in.models.push_back(frozen_params<T>(m));
  return in;
}

// WeightSource that merges the inputs on the fly under the coefficients.
template <typename T>
class MergedSource {
 public:
  MergedSource(MergeInputs<T>& inputs, BasicCoefficientSet<T>& coeffs) : inputs_(inputs), coeffs_(coeffs) {
    if (coeffs_.num_models != inputs_.models.size()) {
      throw ShapeError("coefficients are for " + std::to_string(coeffs_.num_models) + " models, got " +
                       std::to_string(inputs_.models.size()));
    }
  }

  Var<T> embed(Tape<T>& tape, const std::vector<std::int64_t>& ids) {
    const std::string name = "embed.tok";
    auto* c = find(name);
    if (c == nullptr) return ad::gather_rows(tape.parameter(get(inputs_.base, name)), ids);
    Var<T> out;
    for (std::size_t i = 0; i < c->size(); ++i) {
      Var<T> term = ad::gather_rows(tape.parameter(get(inputs_.models[i], name)), ids) * tape.parameter((*c)[i]);
      out = i == 0 ? term : out + term;
    }
    return out;
  }

  Var<T> vector(Tape<T>& tape, const std::string& name) {
    auto* c = find(name);
    if (c == nullptr) return tape.parameter(get(inputs_.base, name));
    Var<T> out;
    for (std::size_t i = 0; i < c->size(); ++i) {
      Var<T> term = tape.parameter(get(inputs_.models[i], name)) * tape.parameter((*c)[i]);
      out = i == 0 ? term : out + term;
    }
    return out;
  }

  Var<T> linear(Tape<T>& tape, const std::string& name, Var<T> x) {
    auto* c = find(name);
    if (c == nullptr) return ad::linear(x, tape.parameter(get(inputs_.base, name)));
    Var<T> out;
    for (std::size_t i = 0; i < c->size(); ++i) {
      Var<T> term = ad::linear(x * tape.parameter((*c)[i]), tape.parameter(get(inputs_.models[i], name)));
      out = i == 0 ? term : out + term;
    }
    return out;
  }

 private:
  std::vector<Parameter<T>>* find(const std::string& name) {
    auto it = coeffs_.layers.find(name);
    return it == coeffs_.layers.end() ? nullptr : &it->second;
  }
  static Parameter<T>& get(ModelParams<T>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("model is missing tensor '" + name + "'");
    return it->second;
  }

  MergeInputs<T>& inputs_;
  BasicCoefficientSet<T>& coeffs_;
};

template <typename T>
Var<T> merged_forward(Tape<T>& tape, MergeInputs<T>& inputs, BasicCoefficientSet<T>& coeffs,
                      const TransformerConfig& config, const TokenBatch& batch) {
  MergedSource<T> source(inputs, coeffs);
  return forward<T>(tape, source, config, batch);
}

// Logits as [rows, vocab].
template <typename T>
Var<T> as_rows(Var<T> logits) {
  const Shape& s = logits.shape();
  return ad::reshape(logits, {logits.value().size() / s.back(), s.back()});
}

// Σ_d KL over the rows of dataset d, averaged per dataset. The merged
// distribution is the left argument unless the direction is swapped.
template <typename T>
Var<T> kl_loss(std::span<const Var<T>> merged, std::span<const BasicTensor<T>> experts,
               KlDirection direction = KlDirection::kMergedFirst) {
  if (merged.empty() || merged.size() != experts.size()) throw ShapeError("kl_loss needs one expert per dataset");
  Var<T> total;
  for (std::size_t d = 0; d < merged.size(); ++d) {
    if (merged[d].shape() != experts[d].shape()) {
      throw ShapeError("kl_loss shapes differ: " + shape_str(merged[d].shape()) + " vs " +
                       shape_str(experts[d].shape()));
    }
    Tape<T>& tape = merged[d].tape();
    Var<T> m = as_rows(merged[d]);
    const std::size_t rows = m.shape()[0];
    Var<T> e = tape.constant(experts[d].reshaped(m.shape()));
    Var<T> log_m = ad::log_softmax(m);
    Var<T> log_e = ad::log_softmax(e);
    Var<T> kl = direction == KlDirection::kMergedFirst ? ad::softmax(m) * (log_m - log_e)
                                                       : ad::softmax(e) * (log_e - log_m);
    Var<T> term = ad::scale(ad::sum(kl), 1.0 / static_cast<double>(rows));
    total = d == 0 ? term : total + term;
  }
  return total;
}

// Mean squared logit difference, averaged over datasets, rows and vocabulary.
template <typename T>
Var<T> mse_loss(std::span<const Var<T>> merged, std::span<const BasicTensor<T>> experts) {
  if (merged.empty() || merged.size() != experts.size()) throw ShapeError("mse_loss needs one expert per dataset");
  Var<T> total;
  for (std::size_t d = 0; d < merged.size(); ++d) {
    if (merged[d].shape() != experts[d].shape()) {
      throw ShapeError("mse_loss shapes differ: " + shape_str(merged[d].shape()) + " vs " +
                       shape_str(experts[d].shape()));
    }
    Var<T> diff = merged[d] - merged[d].tape().constant(experts[d]);
    Var<T> term = ad::mean(diff * diff);
    total = d == 0 ? term : total + term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(merged.size()));
}

// Σ_d mean row entropy of the merged distribution.
template <typename T>
Var<T> entropy_loss(std::span<const Var<T>> merged) {
  if (merged.empty()) throw ShapeError("entropy_loss needs at least one dataset");
  Var<T> total;
  for (std::size_t d = 0; d < merged.size(); ++d) {
    Var<T> m = as_rows(merged[d]);
    const std::size_t rows = m.shape()[0];
    Var<T> plogp = ad::softmax(m) * ad::log_softmax(m);
    Var<T> term = ad::scale(ad::sum(plogp), -1.0 / static_cast<double>(rows));
    total = d == 0 ? term : total + term;
  }
  return total;
}

// λ Σ_layers Σ_{i<j} cos(c_i, c_j). Null when there is nothing to add.
template <typename T>
std::optional<Var<T>> cosine_penalty(Tape<T>& tape, BasicCoefficientSet<T>& coeffs, double lambda) {
  if (lambda == 0.0 || coeffs.num_models < 2) return std::nullopt;
  std::optional<Var<T>> total;
  for (auto& [name, per_model] : coeffs.layers) {
    std::vector<Var<T>> vars;
    for (auto& p : per_model) vars.push_back(tape.parameter(p));
    for (std::size_t i = 0; i < vars.size(); ++i) {
      for (std::size_t j = i + 1; j < vars.size(); ++j) {
        Var<T> c = ad::cosine(vars[i], vars[j]);
        total = total ? *total + c : c;
      }
    }
  }
  if (!total) return std::nullopt;
  return ad::scale(*total, lambda);
}

// λ1 Σ|c| and λ2 Σ c², each null when its weight is zero.
template <typename T>
std::pair<std::optional<Var<T>>, std::optional<Var<T>>> reg_penalty(Tape<T>& tape, BasicCoefficientSet<T>& coeffs,
                                                                    double lambda_l1, double lambda_l2) {
  std::optional<Var<T>> l1, l2;
  for (auto& [name, per_model] : coeffs.layers) {
    for (auto& p : per_model) {
      Var<T> c = tape.parameter(p);
      if (lambda_l1 != 0.0) {
        Var<T> a = ad::sum(ad::abs(c));
        l1 = l1 ? *l1 + a : a;
      }
      if (lambda_l2 != 0.0) {
        Var<T> s = ad::sum(c * c);
        l2 = l2 ? *l2 + s : s;
      }
    }
  }
  if (l1) l1 = ad::scale(*l1, lambda_l1);
  if (l2) l2 = ad::scale(*l2, lambda_l2);
  return {l1, l2};
}

struct ObjectiveBreakdown {
  double total = 0.0;
  double task = 0.0;  // KL, MSE or entropy
  double cosine = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
};

template <typename T>
struct Objective {
  Var<T> total;
  ObjectiveBreakdown parts;
};

// Returns the owning expert's logits for a batch. Only called for losses
// that compare against the experts.
template <typename T>
using ExpertLogitsFn = std::function<BasicTensor<T>(const TokenBatch& batch)>;

// Full objective over one batch per dataset (batch d is scored against the
// expert named by its affinity).
template <typename T>
Objective<T> dam_objective(Tape<T>& tape, MergeInputs<T>& inputs, BasicCoefficientSet<T>& coeffs,
                           const TransformerConfig& model_config, const DamConfig& config,
                           std::span<const TokenBatch> batches, const ExpertLogitsFn<T>& expert_logits) {
  if (batches.empty()) throw ConfigError("objective needs at least one batch");
  std::vector<Var<T>> merged;
  for (const TokenBatch& b : batches) merged.push_back(merged_forward(tape, inputs, coeffs, model_config, b));
  Var<T> task;
  if (config.loss == DamLoss::kEntropy) {
    task = entropy_loss<T>(merged);
  } else {
    std::vector<BasicTensor<T>> experts;
    for (const TokenBatch& b : batches) {
      if (b.affinity >= inputs.models.size()) {
        throw ConfigError("batch affinity " + std::to_string(b.affinity) + " has no model");
      }
      experts.push_back(expert_logits(b));
    }
    task = config.loss == DamLoss::kKl ? kl_loss<T>(merged, experts, config.kl_direction) : mse_loss<T>(merged, experts);
  }
  Objective<T> out;
  out.parts.task = task.value().item();
  out.total = task;
  if (auto cos = cosine_penalty(tape, coeffs, config.lambda_cosine)) {
    out.parts.cosine = cos->value().item();
    out.total = out.total + *cos;
  }
  auto [l1, l2] = reg_penalty(tape, coeffs, config.lambda_l1, config.lambda_l2);
  if (l1) {
    out.parts.l1 = l1->value().item();
    out.total = out.total + *l1;
  }
  if (l2) {
    out.parts.l2 = l2->value().item();
    out.total = out.total + *l2;
  }
  out.parts.total = out.total.value().item();
  return out;
}

// Value-level conveniences over plain logits, evaluated in double.
double kl_loss(std::span<const TensorD> merged, std::span<const TensorD> experts,
               KlDirection direction = KlDirection::kMergedFirst);
double mse_loss(std::span<const TensorD> merged, std::span<const TensorD> experts);
double entropy_loss(std::span<const TensorD> merged);
double cosine_penalty(const CoefficientSet& coeffs, double lambda);
double reg_penalty(const CoefficientSet& coeffs, double lambda_l1, double lambda_l2);

// Caches expert logits across runs that share data and experts.
class ExpertLogitCache {
 public:
  ExpertLogitCache(std::span<const WeightMap> models, const TransformerConfig& config);
  TensorD logits(const TokenBatch& batch);
  std::size_t computed() const { return computed_; }

 private:
  std::vector<ModelParams<double>> models_;
  TransformerConfig config_;
  std::map<std::pair<std::size_t, std::vector<std::vector<std::int64_t>>>, TensorD> cache_;
  std::size_t computed_ = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t dataset = 0;
  ObjectiveBreakdown objective;
};

struct CoefficientSummary {
  std::vector<double> mean;      // per model, over every coefficient
  std::vector<double> mean_abs;  // per model
  std::vector<double> min;
  std::vector<double> max;
};

CoefficientSummary summarize(const CoefficientSet& coeffs);

struct TrainReport {
  DamConfig config;
  std::vector<StepRecord> steps;
  // Full objective on the fixed probe set before and after training.
  ObjectiveBreakdown initial_probe;
  ObjectiveBreakdown final_probe;
  CoefficientSummary summary;
  double wall_seconds = 0.0;

  // Everything except wall-clock time, so equal runs give equal JSON.
  nlohmann::json summary_json() const;
  void write_jsonl(const std::filesystem::path& path) const;
};

struct DamResult {
  CoefficientSet coefficients;
  TrainReport report;
};

// datasets[d] is the training stream of expert d. Each step draws the next
// batch_size records of dataset (step mod D), concatenated into one batch.
DamResult dam_train(const WeightMap& base, std::span<const WeightMap> models,
                    std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& model_config,
                    const DamConfig& config, ExpertLogitCache* cache = nullptr);

// Materializes Σ_i W_i diag(c_i) per in-scope tensor; the rest from base.
WeightMap bake(const WeightMap& base, std::span<const WeightMap> models, const CoefficientSet& coeffs);

// Coefficients as safetensors, one [in_features] tensor per
// "dam.{layer}.model{i}".
WeightMap coefficients_to_weights(const CoefficientSet& coeffs);
CoefficientSet coefficients_from_weights(const WeightMap& weights);
void write_coefficients(const CoefficientSet& coeffs, const std::filesystem::path& path);
CoefficientSet read_coefficients(const std::filesystem::path& path);

}  // namespace mergeforge

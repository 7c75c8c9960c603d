// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Data-free merging over task vectors: linear soups, SLERP with per-layer
// schedules, TIES (trim / elect sign / disjoint mean), DARE sparsification
// and the DARE-TIES composition.
//
// Deltas are held in double. The difference of two floats is exact in
// double for weights of comparable magnitude, so base + (model - base)
// rounds back to the original model, and a merge rounds to f32 only once.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

using TaskVector = std::map<std::string, TensorD>;

// Per-tensor model - base over the in-scope names.
TaskVector task_vector(const WeightMap& model, const WeightMap& base, MergeScope scope = MergeScope::kAll);
// base + delta for every tensor in the task vector; other tensors from base.
WeightMap apply_task_vector(const WeightMap& base, const TaskVector& delta);

// Σ_i weights[i] · models[i] over every tensor.
WeightMap linear_merge(std::span<const WeightMap> models, std::span<const float> weights);
// Same over the in-scope tensors; out-of-scope tensors are copied from base.
WeightMap linear_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                       MergeScope scope);

// Interpolation parameter t per layer.
struct TSchedule {
  enum class Kind { kConstant, kUShape, kPerLayer };
  Kind kind = Kind::kConstant;
  double value = 0.5;          // kConstant
  double lo = 0.0, hi = 1.0;   // kUShape: hi at both ends, lo in the middle
  std::vector<double> values;  // kPerLayer, one per block

  static TSchedule constant(double t);
  static TSchedule u_shape(double lo, double hi);
  static TSchedule per_layer(std::vector<double> values);

  // t for a block index in [0, num_layers).
  double at(std::size_t layer, std::size_t num_layers) const;
};

void to_json(nlohmann::json& j, const TSchedule& s);
void from_json(const nlohmann::json& j, TSchedule& s);

// Layer a tensor is scheduled with: its block, 0 for the embedding, the last
// block for the final norm and the head.
std::size_t schedule_layer(const std::string& name, std::size_t num_layers);
// Number of transformer blocks named in a weight map (at least 1).
std::size_t count_blocks(const WeightMap& weights);

// Spherical interpolation between two flattened deltas. Falls back to linear
// interpolation when the angle is below 1e-6 or either norm below 1e-12.
TensorD slerp_delta(const TensorD& delta_a, const TensorD& delta_b, double t);
WeightMap slerp_merge(const WeightMap& base, const WeightMap& model_a, const WeightMap& model_b,
                      const TSchedule& schedule, MergeScope scope = MergeScope::kAll);

// Keeps the top ceil(density · n) entries by magnitude; ties at the
// threshold go to the lower flat index.
TensorD ties_trim(const TensorD& delta, double density);
// Sign of the per-position sum, in {-1, 0, +1}.
TensorD ties_elect_sign(std::span<const TensorD> deltas);
// Weighted mean of the deltas whose sign matches the elected sign, with
// weights renormalized over the contributing models. Positions with an
// elected sign of 0 or no contributors get 0.
TensorD disjoint_merge(std::span<const TensorD> deltas, const TensorD& signs, std::span<const float> weights);
WeightMap ties_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                     double density, MergeScope scope = MergeScope::kAll);

// Drops each entry with probability drop_p and rescales survivors by
// 1 / (1 - drop_p).
TensorD dare_sparsify(const TensorD& delta, double drop_p, std::uint64_t seed);
// Seed used for model `model_index`, tensor `name` under a recipe seed.
std::uint64_t dare_seed(std::uint64_t recipe_seed, std::size_t model_index, const std::string& name);
WeightMap dare_ties_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                          double drop_p, std::uint64_t seed, MergeScope scope = MergeScope::kAll);

enum class MergeMethod { kSoup, kWeighted, kSlerp, kTies, kDareTies };

std::string to_string(MergeMethod method);
MergeMethod parse_merge_method(const std::string& text);

struct MergeRecipe {
  MergeMethod method = MergeMethod::kSoup;
  std::string base;                 // path, may be empty for soup/weighted
  std::vector<std::string> models;  // paths
  std::vector<float> weights;       // empty means uniform 1/N
  double density = 1.0;
  double drop_p = 0.0;
  TSchedule t_schedule;
  std::uint64_t seed = 0;
  MergeScope merge_scope = MergeScope::kLinearOnly;
  std::string output;

  // Checks method-specific fields against the number of models.
  void validate(std::size_t num_models) const;
  std::vector<float> resolved_weights(std::size_t num_models) const;
};

void to_json(nlohmann::json& j, const MergeRecipe& r);
void from_json(const nlohmann::json& j, MergeRecipe& r);

// Runs a recipe on in-memory models. `base` is required by every method
// except an all-tensor soup/weighted merge. The output carries the method
// and hyperparameters in its metadata.
WeightMap execute_recipe(const MergeRecipe& recipe, const WeightMap* base, std::span<const WeightMap> models);

// Loads the recipe's checkpoints relative to `root`, merges, writes output.
WeightMap run_recipe(const MergeRecipe& recipe, const std::filesystem::path& root);

}  // namespace mergeforge

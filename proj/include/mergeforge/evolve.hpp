// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// (μ+λ) evolution strategy over per-layer linear-merge weights.
//
// A genome has one row per transformer block plus a final row for the
// in-scope tensors outside the blocks (lm_head, and embed/final_norm under
// scope "all"). Row r holds one weight per source model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/model.hpp"

namespace mergeforge {

using Genome = std::vector<std::vector<double>>;

// Row index for every in-scope tensor.
std::map<std::string, std::size_t> genome_rows(const WeightMap& base, MergeScope scope);
std::size_t genome_row_count(const WeightMap& base, MergeScope scope);

Genome uniform_genome(std::size_t rows, std::size_t num_models);
void validate_genome(const Genome& genome, std::size_t rows, std::size_t num_models);

// Per-tensor linear merge with the row's weights (rounded to f32, summed in
// double in model order); out-of-scope tensors come from the base.
WeightMap bake_genome(const Genome& genome, const WeightMap& base, std::span<const WeightMap> models,
                      MergeScope scope);

// Mean over datasets of the per-dataset next-token loss. Per-dataset values
// are summed in ascending order so the result ignores dataset order.
double mean_task_loss(const WeightMap& weights, const TransformerConfig& config,
                      std::span<const std::vector<TokenBatch>> datasets);

struct EvoConfig {
  std::size_t mu = 4;
  std::size_t lambda = 8;
  double sigma = 0.1;
  std::size_t generations = 10;
  std::uint64_t seed = 0;
  // Eval batches drawn per dataset for every fitness call (0 = all of them).
  std::size_t fitness_batches = 8;
  MergeScope merge_scope = MergeScope::kLinearOnly;

  void validate() const;
  bool operator==(const EvoConfig&) const = default;
};

void to_json(nlohmann::json& j, const EvoConfig& c);
void from_json(const nlohmann::json& j, EvoConfig& c);

// The batches a fitness call sees: a seeded subset, fixed for a whole run.
std::vector<std::vector<TokenBatch>> fitness_subset(std::span<const std::vector<TokenBatch>> datasets,
                                                    std::size_t per_dataset, std::uint64_t seed);

// The subset evolve() scores every genome on.
std::vector<std::vector<TokenBatch>> fitness_data(std::span<const std::vector<TokenBatch>> datasets,
                                                  const EvoConfig& evo);

double fitness(const Genome& genome, const WeightMap& base, std::span<const WeightMap> models,
               std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& config, MergeScope scope);

struct GenerationRecord {
  std::size_t generation = 0;
  double best = 0.0;
  double mean = 0.0;
  std::size_t evaluations = 0;
};

struct EvoResult {
  Genome best;
  double best_fitness = 0.0;
  std::vector<GenerationRecord> history;

  void write_history_jsonl(const std::filesystem::path& path) const;
};

EvoResult evolve(const WeightMap& base, std::span<const WeightMap> models,
                 std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& config,
                 const EvoConfig& evo);

}  // namespace mergeforge

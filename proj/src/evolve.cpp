// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/evolve.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mergeforge/error.hpp"

namespace mergeforge {

std::map<std::string, std::size_t> genome_rows(const WeightMap& base, MergeScope scope) {
  std::size_t blocks = 0;
  for (const auto& [name, t] : base.tensors) {
    if (auto b = block_index(name)) blocks = std::max(blocks, *b + 1);
  }
  std::map<std::string, std::size_t> rows;
  for (const auto& [name, t] : base.tensors) {
    if (!in_scope(name, scope)) continue;
    rows.emplace(name, block_index(name).value_or(blocks));
  }
  return rows;
}

std::size_t genome_row_count(const WeightMap& base, MergeScope scope) {
  std::size_t n = 0;
  for (const auto& [name, row] : genome_rows(base, scope)) n = std::max(n, row + 1);
  return n;
}

Genome uniform_genome(std::size_t rows, std::size_t num_models) {
  const double u = static_cast<double>(1.0f / static_cast<float>(num_models));
  return Genome(rows, std::vector<double>(num_models, u));
}

void validate_genome(const Genome& genome, std::size_t rows, std::size_t num_models) {
  if (genome.size() != rows) {
    throw ShapeError("genome has " + std::to_string(genome.size()) + " rows, expected " + std::to_string(rows));
  }
  for (const auto& row : genome) {
    if (row.size() != num_models) throw ShapeError("genome row has the wrong number of models");
    for (double v : row) {
      if (!std::isfinite(v)) throw NumericError("genome contains a non-finite weight");
    }
  }
}

WeightMap bake_genome(const Genome& genome, const WeightMap& base, std::span<const WeightMap> models,
                      MergeScope scope) {
  if (models.empty()) throw ConfigError("evolve needs at least one model");
  std::vector<WeightMap> all(models.begin(), models.end());
  all.push_back(base);
  require_compatible(all);
  const auto rows = genome_rows(base, scope);
  validate_genome(genome, genome_row_count(base, scope), models.size());
  WeightMap out;
  out.metadata = base.metadata;
  for (const auto& [name, b] : base.tensors) {
    auto it = rows.find(name);
    if (it == rows.end()) {
      out.tensors.emplace(name, b);
      continue;
    }
    std::vector<float> w(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) w[m] = static_cast<float>(genome[it->second][m]);
    Tensor merged(b.shape());
    for (std::size_t k = 0; k < merged.size(); ++k) {
      double acc = 0.0;
      for (std::size_t m = 0; m < models.size(); ++m) {
        acc += static_cast<double>(w[m]) * static_cast<double>(models[m].at(name)[k]);
      }
      merged[k] = static_cast<float>(acc);
    }
    out.tensors.emplace(name, std::move(merged));
  }
  return out;
}

double mean_task_loss(const WeightMap& weights, const TransformerConfig& config,
                      std::span<const std::vector<TokenBatch>> datasets) {
  if (datasets.empty()) throw ConfigError("no datasets to evaluate");
  std::vector<double> losses;
  for (const auto& d : datasets) losses.push_back(mean_next_token_loss(weights, config, d));
  std::sort(losses.begin(), losses.end());
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(losses.size());
}

void EvoConfig::validate() const {
  if (mu < 1) throw ConfigError("evo mu must be at least 1");
  if (lambda < 1) throw ConfigError("evo lambda must be at least 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("evo sigma must be positive");
}

void to_json(nlohmann::json& j, const EvoConfig& c) {
  j = {{"mu", c.mu},
       {"lambda", c.lambda},
       {"sigma", c.sigma},
       {"generations", c.generations},
       {"seed", c.seed},
       {"fitness_batches", c.fitness_batches},
       {"merge_scope", to_string(c.merge_scope)}};
}

void from_json(const nlohmann::json& j, EvoConfig& c) {
  if (!j.is_object()) throw ConfigError("evo config must be a JSON object");
  static const std::vector<std::string> known = {"mu",   "lambda",          "sigma",      "generations",
                                                 "seed", "fitness_batches", "merge_scope"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown evo config field '" + key + "'");
    }
  }
  try {
    EvoConfig e;
    e.mu = j.value("mu", e.mu);
    e.lambda = j.value("lambda", e.lambda);
    e.sigma = j.value("sigma", e.sigma);
    e.generations = j.value("generations", e.generations);
    e.seed = j.value("seed", e.seed);
    e.fitness_batches = j.value("fitness_batches", e.fitness_batches);
    e.merge_scope = parse_merge_scope(j.value("merge_scope", to_string(e.merge_scope)));
    e.validate();
    c = e;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad evo config: ") + ex.what());
  }
}

std::vector<std::vector<TokenBatch>> fitness_subset(std::span<const std::vector<TokenBatch>> datasets,
                                                    std::size_t per_dataset, std::uint64_t seed) {
  std::vector<std::vector<TokenBatch>> out;
  std::mt19937_64 rng(seed);
  for (const auto& d : datasets) {
    if (per_dataset == 0 || per_dataset >= d.size()) {
      out.push_back(d);
      continue;
    }
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(per_dataset);
    std::sort(idx.begin(), idx.end());
    std::vector<TokenBatch> pick;
    for (std::size_t i : idx) pick.push_back(d[i]);
    out.push_back(std::move(pick));
  }
  return out;
}

std::vector<std::vector<TokenBatch>> fitness_data(std::span<const std::vector<TokenBatch>> datasets,
                                                  const EvoConfig& evo) {
  return fitness_subset(datasets, evo.fitness_batches, evo.seed ^ 0x5eedf00dULL);
}

double fitness(const Genome& genome, const WeightMap& base, std::span<const WeightMap> models,
               std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& config, MergeScope scope) {
  const double f = mean_task_loss(bake_genome(genome, base, models, scope), config, datasets);
  if (!std::isfinite(f)) throw NumericError("non-finite fitness");
  return f;
}

void EvoResult::write_history_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const GenerationRecord& r : history) {
    const nlohmann::json j = {
        {"generation", r.generation}, {"best", r.best}, {"mean", r.mean}, {"evaluations", r.evaluations}};
    out << j.dump() << "\n";
  }
}

namespace {

struct Individual {
  Genome genome;
  double fitness = 0.0;
};

GenerationRecord record(std::size_t generation, const std::vector<Individual>& population, std::size_t evaluations) {
  GenerationRecord r;
  r.generation = generation;
  r.best = population.front().fitness;
  for (const auto& ind : population) r.mean += ind.fitness;
  r.mean /= static_cast<double>(population.size());
  r.evaluations = evaluations;
  return r;
}

}  // namespace

EvoResult evolve(const WeightMap& base, std::span<const WeightMap> models,
                 std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& config,
                 const EvoConfig& evo) {
  evo.validate();
  if (models.empty()) throw ConfigError("evolve needs at least one model");
  const auto batches = fitness_data(datasets, evo);
  const std::size_t rows = genome_row_count(base, evo.merge_scope);
  const std::size_t n = models.size();
  std::mt19937_64 rng(evo.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t evaluations = 0;
  auto evaluate = [&](Genome g) {
    ++evaluations;
    const double f = fitness(g, base, models, batches, config, evo.merge_scope);
    return Individual{std::move(g), f};
  };
  auto by_fitness = [](const Individual& a, const Individual& b) { return a.fitness < b.fitness; };

  std::vector<Individual> population;
  population.push_back(evaluate(uniform_genome(rows, n)));
  while (population.size() < evo.mu) {
    Genome g = uniform_genome(rows, n);
    for (auto& row : g) {
      for (double& v : row) v += evo.sigma * noise(rng);
    }
    population.push_back(evaluate(std::move(g)));
  }
  std::stable_sort(population.begin(), population.end(), by_fitness);

  EvoResult result;
  result.history.push_back(record(0, population, evaluations));
  std::uniform_int_distribution<std::size_t> pick(0, evo.mu - 1);
  for (std::size_t gen = 1; gen <= evo.generations; ++gen) {
    std::vector<Individual> next = population;
    for (std::size_t k = 0; k < evo.lambda; ++k) {
      Genome child = population[pick(rng)].genome;
      for (auto& row : child) {
        for (double& v : row) v += evo.sigma * noise(rng);
      }
      next.push_back(evaluate(std::move(child)));
    }
    // Parents precede offspring, so ties keep the incumbent.
    std::stable_sort(next.begin(), next.end(), by_fitness);
    next.resize(evo.mu);
    population = std::move(next);
    result.history.push_back(record(gen, population, evaluations));
  }
  result.best = population.front().genome;
  result.best_fitness = population.front().fitness;
  return result;
}

}  // namespace mergeforge

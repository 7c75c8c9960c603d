// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks, expert fabrication, the merge pipeline and its report.
//
// Workspace layout (all relative to the workspace root):
//   cache/fab-<hash>/            base, experts and datasets; manifest.json last
//   <output>/report.json         machine-readable report
//   <output>/report.txt          aligned table, methods × tasks, Avg last
//   <output>/models/<name>.safetensors
//   <output>/logs/<name>.jsonl   DAM steps or evolve generations

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/dam.hpp"
#include "mergeforge/evolve.hpp"
#include "mergeforge/merge.hpp"
#include "mergeforge/model.hpp"

namespace mergeforge {

enum class TaskKind { kCopy, kReversePattern, kModularSequence, kConstantGrammar };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::string name;  // defaults to the kind
  std::int64_t vocab_lo = 0;
  std::int64_t vocab_hi = 32;  // exclusive
  std::size_t seq_len = 16;
  std::size_t samples = 400;
  std::uint64_t seed = 0;

  std::string label() const;
  void validate(std::size_t vocab_size) const;
  bool operator==(const TaskSpec&) const = default;
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);

// Distinct sequences for one task, each a single-sequence batch with the
// given affinity. copy: a random half followed by its repetition.
// reverse_pattern: a random half followed by its reversal.
// modular_sequence: x, x+k, x+2k, ... mod the slice width.
// constant_grammar: a fixed seeded bigram grammar, two successors per token.
std::vector<TokenBatch> generate_task(const TaskSpec& spec, std::size_t affinity, std::uint64_t seed);

struct TaskData {
  std::string name;
  std::vector<TokenBatch> train;
  std::vector<TokenBatch> eval;
};

// 90/10 split after a seeded shuffle.
TaskData split_task(const std::string& name, std::vector<TokenBatch> samples, std::uint64_t seed);

// Generates every task; when `dir` is given writes <name>.train.jsonl and
// <name>.eval.jsonl there.
std::vector<TaskData> gen_tasks(std::span<const TaskSpec> specs, std::size_t vocab_size, std::uint64_t seed,
                                const std::optional<std::filesystem::path>& dir = std::nullopt);

// Mean next-token cross-entropy on each task's eval split.
std::vector<double> eval_model(const WeightMap& weights, const TransformerConfig& config,
                               std::span<const TaskData> tasks);

struct FabricationConfig {
  std::size_t steps = 1000;
  double learning_rate = 0.1;
  MergeScope trainable = MergeScope::kLinearOnly;
  bool operator==(const FabricationConfig&) const = default;
};

void to_json(nlohmann::json& j, const FabricationConfig& f);
void from_json(const nlohmann::json& j, FabricationConfig& f);

enum class MethodKind { kRecipe, kDam, kEvolve };

struct MethodSpec {
  std::string name;
  MethodKind kind = MethodKind::kRecipe;
  MergeRecipe recipe;
  DamConfig dam;
  EvoConfig evo;
};

void to_json(nlohmann::json& j, const MethodSpec& m);
void from_json(const nlohmann::json& j, MethodSpec& m);

struct PipelineConfig {
  std::uint64_t seed = 0;
  TransformerConfig model;
  std::vector<TaskSpec> tasks;
  FabricationConfig fabrication;
  std::vector<MethodSpec> methods;
  std::string output = "runs/default";

  // Two tasks on disjoint vocabulary halves; soup, slerp, ties, dare_ties,
  // one DAM run per ablation row, evolve.
  static PipelineConfig defaults();
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& p);
void from_json(const nlohmann::json& j, PipelineConfig& p);

struct Fabrication {
  std::filesystem::path dir;
  bool cached = false;
  WeightMap base;
  std::vector<WeightMap> experts;
  std::vector<TaskData> tasks;
  // expert_losses[e][t]: expert e evaluated on task t.
  std::vector<std::vector<double>> expert_losses;
};

std::string fabrication_key(const PipelineConfig& config);

// Loads base, experts and datasets from the cache, or builds them. Every
// expert must beat every other expert on its own task.
Fabrication fabricate(const PipelineConfig& config, const std::filesystem::path& workspace);

struct ReportRow {
  std::string name;
  std::vector<double> losses;
  double avg = 0.0;
  bool operator==(const ReportRow&) const = default;
};

ReportRow make_row(std::string name, std::vector<double> losses);

struct Report {
  std::vector<std::string> tasks;
  std::vector<ReportRow> methods;
  std::vector<ReportRow> references;  // base and experts
  nlohmann::json config;
  nlohmann::json details;  // per-method training summaries
  bool operator==(const Report&) const = default;

  const ReportRow& method(const std::string& name) const;
};

void to_json(nlohmann::json& j, const Report& r);
void from_json(const nlohmann::json& j, Report& r);

std::string report_table(const Report& report);

// Writes report.json and report.txt into `dir`.
void emit_report(const Report& report, const std::filesystem::path& dir);

struct StageTime {
  std::string stage;
  double seconds = 0.0;
};

struct PipelineResult {
  Report report;
  bool fabrication_cached = false;
  std::vector<StageTime> timing;  // kept out of the report so its bytes are reproducible
};

PipelineResult run_pipeline(const PipelineConfig& config, const std::filesystem::path& workspace);

}  // namespace mergeforge

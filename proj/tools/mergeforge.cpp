// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0
//
// mergeforge <subcommand> --config <job.json> [--seed N] [--workspace DIR]
//
// Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 1 anything else.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "mergeforge/dam.hpp"
#include "mergeforge/evolve.hpp"
#include "mergeforge/harness.hpp"
#include "mergeforge/merge.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mergeforge;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string workspace;
};

fs::path workspace_root(const Options& o) {
  if (!o.workspace.empty()) return o.workspace;
  if (const char* env = std::getenv("MERGEFORGE_WORKSPACE")) return env;
  return fs::current_path();
}

fs::path resolve(const fs::path& root, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : root / path;
}

json load_config(const Options& o, bool required) {
  if (o.config.empty()) {
    if (required) throw ConfigError("--config is required");
    return json::object();
  }
  std::ifstream in(o.config);
  if (!in) throw ConfigError("cannot open config " + o.config);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(o.config + ": " + e.what());
  }
}

// Pulls job-level keys out of a config object; everything else is rejected.
class Job {
 public:
  Job(json j, std::initializer_list<const char*> known) : j_(std::move(j)) {
    if (!j_.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : j_.items()) {
      if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
        throw ConfigError("unknown config field '" + key + "'");
      }
    }
  }

  template <typename T>
  T get(const char* key) const {
    if (!j_.contains(key)) throw ConfigError(std::string("config is missing '") + key + "'");
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }

  template <typename T>
  T get(const char* key, T fallback) const {
    return j_.contains(key) ? get<T>(key) : fallback;
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) const { return j_.at(key); }

 private:
  json j_;
};

std::vector<WeightMap> load_models(const fs::path& root, const std::vector<std::string>& paths) {
  std::vector<WeightMap> out;
  for (const auto& p : paths) out.push_back(read_checkpoint(resolve(root, p)));
  return out;
}

TransformerConfig model_config(const Job& job, const WeightMap& reference) {
  if (job.has("model")) return job.get<TransformerConfig>("model");
  if (auto c = config_from_metadata(reference)) return *c;
  throw ConfigError("no model config in the job or the checkpoint metadata");
}

std::vector<std::vector<TokenBatch>> load_datasets(const fs::path& root, const std::vector<std::string>& paths) {
  std::vector<std::vector<TokenBatch>> out;
  for (const auto& p : paths) out.push_back(read_dataset_jsonl(resolve(root, p)));
  return out;
}

PipelineConfig pipeline_config(const Options& o) {
  PipelineConfig cfg = load_config(o, false).get<PipelineConfig>();
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

int cmd_gen_experts(const Options& o) {
  const PipelineConfig cfg = pipeline_config(o);
  const Fabrication fab = fabricate(cfg, workspace_root(o));
  json out = {{"cache", fab.dir.string()}, {"cached", fab.cached}, {"expert_losses", fab.expert_losses}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_merge(const Options& o) {
  MergeRecipe recipe = load_config(o, true).get<MergeRecipe>();
  if (o.seed) recipe.seed = *o.seed;
  if (recipe.output.empty()) throw ConfigError("merge recipe needs an output path");
  run_recipe(recipe, workspace_root(o));
  std::cerr << "wrote " << recipe.output << "\n";
  return 0;
}

int cmd_dam_train(const Options& o) {
  const Job job(load_config(o, true),
                {"base", "models", "datasets", "model", "dam", "coefficients", "output", "log", "summary"});
  const fs::path root = workspace_root(o);
  const WeightMap base = read_checkpoint(resolve(root, job.get<std::string>("base")));
  const auto models = load_models(root, job.get<std::vector<std::string>>("models"));
  const auto datasets = load_datasets(root, job.get<std::vector<std::string>>("datasets"));
  DamConfig dam = job.get<DamConfig>("dam", DamConfig{});
  if (o.seed) dam.seed = *o.seed;
  const TransformerConfig model = model_config(job, base);
  const DamResult r = dam_train(base, models, datasets, model, dam);
  write_coefficients(r.coefficients, resolve(root, job.get<std::string>("coefficients")));
  if (job.has("output")) write_checkpoint(bake(base, models, r.coefficients), resolve(root, job.get<std::string>("output")));
  if (job.has("log")) r.report.write_jsonl(resolve(root, job.get<std::string>("log")));
  const std::string summary = r.report.summary_json().dump(2);
  if (job.has("summary")) {
    std::ofstream(resolve(root, job.get<std::string>("summary"))) << summary << "\n";
  }
  std::cout << summary << "\n";
  std::cerr << "dam-train: " << r.report.steps.size() << " steps in " << r.report.wall_seconds << " s\n";
  return 0;
}

int cmd_evolve(const Options& o) {
  const Job job(load_config(o, true), {"base", "models", "datasets", "model", "evo", "output", "history"});
  const fs::path root = workspace_root(o);
  const WeightMap base = read_checkpoint(resolve(root, job.get<std::string>("base")));
  const auto models = load_models(root, job.get<std::vector<std::string>>("models"));
  const auto datasets = load_datasets(root, job.get<std::vector<std::string>>("datasets"));
  EvoConfig evo = job.get<EvoConfig>("evo", EvoConfig{});
  if (o.seed) evo.seed = *o.seed;
  const EvoResult r = evolve(base, models, datasets, model_config(job, base), evo);
  if (job.has("output")) {
    write_checkpoint(bake_genome(r.best, base, models, evo.merge_scope), resolve(root, job.get<std::string>("output")));
  }
  if (job.has("history")) r.write_history_jsonl(resolve(root, job.get<std::string>("history")));
  std::cout << json{{"best_fitness", r.best_fitness}, {"best_genome", r.best}}.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const Job job(load_config(o, true), {"model_path", "datasets", "model"});
  const fs::path root = workspace_root(o);
  const WeightMap weights = read_checkpoint(resolve(root, job.get<std::string>("model_path")));
  std::vector<TaskData> tasks;
  for (const auto& p : job.get<std::vector<std::string>>("datasets")) {
    TaskData t;
    t.name = fs::path(p).stem().string();
    t.eval = read_dataset_jsonl(resolve(root, p));
    tasks.push_back(std::move(t));
  }
  const auto losses = eval_model(weights, model_config(job, weights), tasks);
  json out = json::object();
  for (std::size_t i = 0; i < tasks.size(); ++i) out[tasks[i].name] = losses[i];
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_report(const Options& o) {
  const Job job(load_config(o, true), {"report", "output"});
  const fs::path root = workspace_root(o);
  std::ifstream in(resolve(root, job.get<std::string>("report")));
  if (!in) throw ConfigError("cannot open report " + job.get<std::string>("report"));
  Report report;
  try {
    report = json::parse(in).get<Report>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad report: ") + e.what());
  }
  if (job.has("output")) emit_report(report, resolve(root, job.get<std::string>("output")));
  std::cout << report_table(report);
  return 0;
}

int cmd_pipeline(const Options& o) {
  const PipelineConfig cfg = pipeline_config(o);
  const PipelineResult r = run_pipeline(cfg, workspace_root(o));
  std::cout << report_table(r.report);
  double total = 0.0;
  for (const StageTime& t : r.timing) {
    std::cerr << "  " << t.stage << ": " << t.seconds << " s\n";
    total += t.seconds;
  }
  std::cerr << "pipeline: " << total << " s" << (r.fabrication_cached ? " (fabrication cached)" : "") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mergeforge: merge small transformer checkpoints"};
  app.require_subcommand(1);
  Options opts;
  std::uint64_t seed = 0;

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"gen-experts", "generate tasks and fabricate base and expert checkpoints"},
      {"merge", "run a data-free merge recipe"},
      {"dam-train", "learn per-column merge coefficients"},
      {"evolve", "search per-layer merge weights with a (mu+lambda) ES"},
      {"eval", "per-task next-token loss of a checkpoint"},
      {"report", "render a report.json as a table"},
      {"pipeline", "fabricate, merge with every method, evaluate, report"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "job config (JSON)");
    sub->add_option("--seed", seed, "override the config's seed");
    sub->add_option("--workspace", opts.workspace, "workspace root (default $MERGEFORGE_WORKSPACE or cwd)");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (CLI::App* sub : subs) {
      if (!sub->parsed()) continue;
      if (sub->count("--seed") > 0) opts.seed = seed;
      const std::string name = sub->get_name();
      if (name == "gen-experts") return cmd_gen_experts(opts);
      if (name == "merge") return cmd_merge(opts);
      if (name == "dam-train") return cmd_dam_train(opts);
      if (name == "evolve") return cmd_evolve(opts);
      if (name == "eval") return cmd_eval(opts);
      if (name == "report") return cmd_report(opts);
      if (name == "pipeline") return cmd_pipeline(opts);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

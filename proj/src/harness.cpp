// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown " + what + " field '" + key + "'");
    }
  }
}

std::string file_stem(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '.' || c == '_';
    if (!ok) c = '_';
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Re-raises with the stage name in front, keeping the exception type.
template <typename F>
auto in_stage(const std::string& stage, F&& f) {
  const std::string prefix = "stage " + stage + ": ";
  try {
    return f();
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), e.tensor(), prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const IncompatibleModelsError& e) {
    throw IncompatibleModelsError(prefix + e.what());
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy:
      return "copy";
    case TaskKind::kReversePattern:
      return "reverse_pattern";
    case TaskKind::kModularSequence:
      return "modular_sequence";
    case TaskKind::kConstantGrammar:
      return "constant_grammar";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& text) {
  for (TaskKind k : {TaskKind::kCopy, TaskKind::kReversePattern, TaskKind::kModularSequence, TaskKind::kConstantGrammar}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown task kind '" + text + "'");
}

std::string TaskSpec::label() const { return name.empty() ? to_string(kind) : name; }

void TaskSpec::validate(std::size_t vocab_size) const {
  if (vocab_lo < 0 || vocab_hi <= vocab_lo + 1) {
    throw ConfigError("task " + label() + ": vocab slice [" + std::to_string(vocab_lo) + ", " +
                      std::to_string(vocab_hi) + ") needs at least two ids");
  }
  if (static_cast<std::size_t>(vocab_hi) > vocab_size) {
    throw ConfigError("task " + label() + ": vocab slice ends at " + std::to_string(vocab_hi) +
                      " past vocab size " + std::to_string(vocab_size));
  }
  if (seq_len < 2) throw ConfigError("task " + label() + ": seq_len must be at least 2");
  if ((kind == TaskKind::kCopy || kind == TaskKind::kReversePattern) && seq_len % 2 != 0) {
    throw ConfigError("task " + label() + ": seq_len must be even");
  }
  if (samples < 10) throw ConfigError("task " + label() + ": needs at least 10 samples");
}

void to_json(json& j, const TaskSpec& t) {
  j = {{"kind", to_string(t.kind)}, {"name", t.label()},    {"vocab_lo", t.vocab_lo}, {"vocab_hi", t.vocab_hi},
       {"seq_len", t.seq_len},      {"samples", t.samples}, {"seed", t.seed}};
}

void from_json(const json& j, TaskSpec& t) {
  reject_unknown(j, {"kind", "name", "vocab_lo", "vocab_hi", "seq_len", "samples", "seed"}, "task");
  try {
    TaskSpec s;
    s.kind = parse_task_kind(j.at("kind").get<std::string>());
    s.name = j.value("name", to_string(s.kind));
    s.vocab_lo = j.value("vocab_lo", s.vocab_lo);
    s.vocab_hi = j.value("vocab_hi", s.vocab_hi);
    s.seq_len = j.value("seq_len", s.seq_len);
    s.samples = j.value("samples", s.samples);
    s.seed = j.value("seed", s.seed);
    t = s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad task spec: ") + e.what());
  }
}

std::vector<TokenBatch> generate_task(const TaskSpec& spec, std::size_t affinity, std::uint64_t seed) {
  spec.validate(static_cast<std::size_t>(spec.vocab_hi));
  const auto m = static_cast<std::uint64_t>(spec.vocab_hi - spec.vocab_lo);
  std::mt19937_64 rng(seed);
  auto token = [&] { return static_cast<std::int64_t>(rng() % m); };

  std::vector<std::array<std::int64_t, 2>> successors;
  if (spec.kind == TaskKind::kConstantGrammar) {
    successors.resize(m);
    for (auto& s : successors) {
      s[0] = token();
      do s[1] = token();
      while (s[1] == s[0]);
    }
  }

  const std::size_t n = spec.seq_len;
  std::set<std::vector<std::int64_t>> seen;
  std::vector<TokenBatch> out;
  std::size_t attempts = 0;
  while (out.size() < spec.samples) {
    if (++attempts > 1000 * spec.samples) {
      throw ConfigError("task " + spec.label() + ": cannot draw " + std::to_string(spec.samples) +
                        " distinct sequences");
    }
    std::vector<std::int64_t> seq;
    switch (spec.kind) {
      case TaskKind::kCopy:
      case TaskKind::kReversePattern: {
        for (std::size_t t = 0; t < n / 2; ++t) seq.push_back(token());
        std::vector<std::int64_t> tail = seq;
        if (spec.kind == TaskKind::kReversePattern) std::reverse(tail.begin(), tail.end());
        seq.insert(seq.end(), tail.begin(), tail.end());
        break;
      }
      case TaskKind::kModularSequence: {
        const std::uint64_t x = rng() % m;
        const std::uint64_t k = 1 + rng() % (m - 1);
        for (std::size_t t = 0; t < n; ++t) seq.push_back(static_cast<std::int64_t>((x + t * k) % m));
        break;
      }
      case TaskKind::kConstantGrammar: {
        std::int64_t x = token();
        for (std::size_t t = 0; t < n; ++t) {
          seq.push_back(x);
          x = successors[x][rng() % 2];
        }
        break;
      }
    }
    for (auto& id : seq) id += spec.vocab_lo;
    if (seen.insert(seq).second) out.push_back({{std::move(seq)}, affinity});
  }
  return out;
}

TaskData split_task(const std::string& name, std::vector<TokenBatch> samples, std::uint64_t seed) {
  if (samples.size() < 2) throw ConfigError("task " + name + ": too few samples to split");
  std::mt19937_64 rng(seed);
  std::shuffle(samples.begin(), samples.end(), rng);
  const std::size_t n_eval = std::max<std::size_t>(1, samples.size() / 10);
  TaskData out;
  out.name = name;
  out.train.assign(samples.begin(), samples.end() - static_cast<std::ptrdiff_t>(n_eval));
  out.eval.assign(samples.end() - static_cast<std::ptrdiff_t>(n_eval), samples.end());
  return out;
}

std::vector<TaskData> gen_tasks(std::span<const TaskSpec> specs, std::size_t vocab_size, std::uint64_t seed,
                                const std::optional<std::filesystem::path>& dir) {
  std::set<std::string> names;
  for (const TaskSpec& s : specs) {
    s.validate(vocab_size);
    if (!names.insert(s.label()).second) throw ConfigError("duplicate task name '" + s.label() + "'");
  }
  std::vector<TaskData> out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::uint64_t task_seed = mix(mix(seed, specs[i].seed), i);
    TaskData t = split_task(specs[i].label(), generate_task(specs[i], i, task_seed), mix(task_seed, 1));
    if (dir) {
      write_dataset_jsonl(*dir / (t.name + ".train.jsonl"), t.train);
      write_dataset_jsonl(*dir / (t.name + ".eval.jsonl"), t.eval);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<double> eval_model(const WeightMap& weights, const TransformerConfig& config,
                               std::span<const TaskData> tasks) {
  validate_schema(weights, config);
  std::vector<double> out;
  for (const TaskData& t : tasks) out.push_back(mean_next_token_loss(weights, config, t.eval));
  return out;
}

void to_json(json& j, const FabricationConfig& f) {
  j = {{"steps", f.steps}, {"learning_rate", f.learning_rate}, {"trainable", to_string(f.trainable)}};
}

void from_json(const json& j, FabricationConfig& f) {
  reject_unknown(j, {"steps", "learning_rate", "trainable"}, "fabrication");
  try {
    FabricationConfig c;
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.trainable = parse_merge_scope(j.value("trainable", to_string(c.trainable)));
    if (!(c.learning_rate > 0.0)) throw ConfigError("fabrication learning_rate must be positive");
    f = c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad fabrication config: ") + e.what());
  }
}

void to_json(json& j, const MethodSpec& m) {
  switch (m.kind) {
    case MethodKind::kRecipe:
      j = m.recipe;
      j.erase("base");
      j.erase("models");
      j.erase("output");
      break;
    case MethodKind::kDam:
      j = m.dam;
      j["method"] = "dam";
      break;
    case MethodKind::kEvolve:
      j = m.evo;
      j["method"] = "evolve";
      break;
  }
  j["name"] = m.name;
}

void from_json(const json& j, MethodSpec& m) {
  if (!j.is_object() || !j.contains("method") || !j.at("method").is_string()) {
    throw ConfigError("each method needs a \"method\" string");
  }
  const std::string method = j.at("method").get<std::string>();
  json rest = j;
  rest.erase("method");
  std::string name;
  if (rest.contains("name")) {
    if (!rest.at("name").is_string()) throw ConfigError("method name must be a string");
    name = rest.at("name").get<std::string>();
    rest.erase("name");
  }
  MethodSpec s;
  if (method == "dam") {
    s.kind = MethodKind::kDam;
    s.dam = rest.get<DamConfig>();
    if (name.empty()) name = "dam[" + objective_name(s.dam) + "]";
  } else if (method == "evolve") {
    s.kind = MethodKind::kEvolve;
    s.evo = rest.get<EvoConfig>();
    if (name.empty()) name = "evolve";
  } else {
    for (const char* key : {"base", "models", "output"}) {
      if (rest.contains(key)) throw ConfigError(std::string("pipeline methods take no '") + key + "' path");
    }
    rest["method"] = method;
    s.kind = MethodKind::kRecipe;
    s.recipe = rest.get<MergeRecipe>();
    if (name.empty()) name = method;
  }
  s.name = name;
  m = s;
}

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig p;
  TaskSpec modular;
  modular.kind = TaskKind::kModularSequence;
  modular.name = "modular";
  modular.vocab_lo = 0;
  modular.vocab_hi = 32;
  modular.seed = 1;
  TaskSpec grammar;
  grammar.kind = TaskKind::kConstantGrammar;
  grammar.name = "grammar";
  grammar.vocab_lo = 32;
  grammar.vocab_hi = 64;
  grammar.seed = 2;
  p.tasks = {modular, grammar};

  auto recipe = [](MergeMethod method) {
    MethodSpec m;
    m.name = to_string(method);
    m.recipe.method = method;
    return m;
  };
  p.methods.push_back(recipe(MergeMethod::kSoup));
  MethodSpec slerp = recipe(MergeMethod::kSlerp);
  slerp.recipe.t_schedule = TSchedule::constant(0.5);
  p.methods.push_back(slerp);
  MethodSpec ties = recipe(MergeMethod::kTies);
  ties.recipe.density = 0.5;
  p.methods.push_back(ties);
  MethodSpec dare = recipe(MergeMethod::kDareTies);
  dare.recipe.drop_p = 0.5;
  p.methods.push_back(dare);
  for (const std::string& row : ablation_rows()) {
    MethodSpec m;
    m.kind = MethodKind::kDam;
    m.dam = apply_objective(DamConfig{}, row);
    m.name = "dam[" + row + "]";
    p.methods.push_back(m);
  }
  MethodSpec evo;
  evo.kind = MethodKind::kEvolve;
  evo.name = "evolve";
  p.methods.push_back(evo);
  return p;
}

void PipelineConfig::validate() const {
  model.validate();
  if (tasks.empty()) throw ConfigError("pipeline needs at least one task");
  for (const TaskSpec& t : tasks) {
    t.validate(model.vocab_size);
    if (t.seq_len > model.max_seq_len) {
      throw ConfigError("task " + t.label() + ": seq_len exceeds the model's max_seq_len");
    }
  }
  if (methods.empty()) throw ConfigError("pipeline needs at least one method");
  std::set<std::string> names, stems;
  for (const MethodSpec& m : methods) {
    if (m.name.empty()) throw ConfigError("method with an empty name");
    if (!names.insert(m.name).second || !stems.insert(file_stem(m.name)).second) {
      throw ConfigError("duplicate method name '" + m.name + "'");
    }
    switch (m.kind) {
      case MethodKind::kRecipe:
        m.recipe.validate(tasks.size());
        break;
      case MethodKind::kDam:
        m.dam.validate();
        break;
      case MethodKind::kEvolve:
        m.evo.validate();
        break;
    }
  }
  if (output.empty() || std::filesystem::path(output).is_absolute()) {
    throw ConfigError("output must be a relative path inside the workspace");
  }
}

void to_json(json& j, const PipelineConfig& p) {
  j = {{"seed", p.seed},         {"model", p.model},     {"tasks", p.tasks}, {"fabrication", p.fabrication},
       {"methods", p.methods}, {"output", p.output}};
}

void from_json(const json& j, PipelineConfig& p) {
  reject_unknown(j, {"seed", "model", "tasks", "fabrication", "methods", "output"}, "pipeline");
  try {
    PipelineConfig c = PipelineConfig::defaults();
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) c.model = j.at("model").get<TransformerConfig>();
    if (j.contains("tasks")) c.tasks = j.at("tasks").get<std::vector<TaskSpec>>();
    if (j.contains("fabrication")) c.fabrication = j.at("fabrication").get<FabricationConfig>();
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<MethodSpec>>();
    c.output = j.value("output", c.output);
    c.validate();
    p = c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad pipeline config: ") + e.what());
  }
}

std::string fabrication_key(const PipelineConfig& config) {
  const json j = {{"seed", config.seed}, {"model", config.model}, {"tasks", config.tasks},
                  {"fabrication", config.fabrication}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

namespace {

void check_distinguishable(const Fabrication& fab) {
  const auto& L = fab.expert_losses;
  for (std::size_t t = 0; t < fab.tasks.size(); ++t) {
    for (std::size_t e = 0; e < fab.experts.size(); ++e) {
      if (e != t && !(L[t][t] < L[e][t])) {
        throw Error("fabrication oracle: expert for " + fab.tasks[e].name + " scores " + std::to_string(L[e][t]) +
                    " on task " + fab.tasks[t].name + ", not worse than its own expert's " +
                    std::to_string(L[t][t]));
      }
    }
  }
}

std::string expert_file(std::size_t i) { return "expert_" + std::to_string(i) + ".safetensors"; }

}  // namespace

Fabrication fabricate(const PipelineConfig& config, const std::filesystem::path& workspace) {
  config.validate();
  Fabrication fab;
  fab.dir = workspace / "cache" / ("fab-" + fabrication_key(config));
  const auto manifest = fab.dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    const json m = read_json(manifest);
    fab.cached = true;
    fab.base = read_checkpoint(fab.dir / "base.safetensors");
    for (std::size_t i = 0; i < config.tasks.size(); ++i) fab.experts.push_back(read_checkpoint(fab.dir / expert_file(i)));
    for (const auto& name : m.at("tasks")) {
      TaskData t;
      t.name = name.get<std::string>();
      t.train = read_dataset_jsonl(fab.dir / "data" / (t.name + ".train.jsonl"));
      t.eval = read_dataset_jsonl(fab.dir / "data" / (t.name + ".eval.jsonl"));
      fab.tasks.push_back(std::move(t));
    }
  } else {
    std::filesystem::remove_all(fab.dir);
    std::filesystem::create_directories(fab.dir);
    fab.tasks = gen_tasks(config.tasks, config.model.vocab_size, config.seed, fab.dir / "data");
    fab.base = init_model(config.model, mix(config.seed, 0xba5e));
    for (std::size_t i = 0; i < fab.tasks.size(); ++i) {
      ExpertTrainOptions opts;
      opts.steps = config.fabrication.steps;
      opts.learning_rate = config.fabrication.learning_rate;
      opts.trainable = config.fabrication.trainable;
      opts.seed = mix(config.seed, 0xe0 + i);
      fab.experts.push_back(train_expert(fab.base, config.model, fab.tasks[i].train, opts).weights);
    }
  }
  for (const WeightMap& e : fab.experts) fab.expert_losses.push_back(eval_model(e, config.model, fab.tasks));
  check_distinguishable(fab);
  if (!fab.cached) {
    write_checkpoint(fab.base, fab.dir / "base.safetensors");
    for (std::size_t i = 0; i < fab.experts.size(); ++i) write_checkpoint(fab.experts[i], fab.dir / expert_file(i));
    json names = json::array();
    for (const TaskData& t : fab.tasks) names.push_back(t.name);
    const json m = {{"key", fabrication_key(config)},
                    {"seed", config.seed},
                    {"model", config.model},
                    {"tasks", names},
                    {"fabrication", config.fabrication}};
    write_text(manifest, m.dump(2) + "\n");
  }
  return fab;
}

ReportRow make_row(std::string name, std::vector<double> losses) {
  ReportRow r;
  r.name = std::move(name);
  double total = 0.0;
  for (double l : losses) total += l;
  r.avg = losses.empty() ? 0.0 : total / static_cast<double>(losses.size());
  r.losses = std::move(losses);
  return r;
}

const ReportRow& Report::method(const std::string& name) const {
  for (const ReportRow& r : methods) {
    if (r.name == name) return r;
  }
  throw ConfigError("report has no method '" + name + "'");
}

namespace {

json rows_json(const std::vector<ReportRow>& rows) {
  json out = json::array();
  for (const ReportRow& r : rows) out.push_back({{"name", r.name}, {"losses", r.losses}, {"avg", r.avg}});
  return out;
}

std::vector<ReportRow> rows_from(const json& j, std::size_t tasks) {
  std::vector<ReportRow> out;
  for (const json& r : j) {
    ReportRow row{r.at("name").get<std::string>(), r.at("losses").get<std::vector<double>>(), r.at("avg").get<double>()};
    if (row.losses.size() != tasks) throw ConfigError("report row " + row.name + " has the wrong number of tasks");
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

void to_json(json& j, const Report& r) {
  j = {{"tasks", r.tasks},
       {"methods", rows_json(r.methods)},
       {"references", rows_json(r.references)},
       {"config", r.config},
       {"details", r.details}};
}

void from_json(const json& j, Report& r) {
  try {
    Report out;
    out.tasks = j.at("tasks").get<std::vector<std::string>>();
    out.methods = rows_from(j.at("methods"), out.tasks.size());
    out.references = rows_from(j.value("references", json::array()), out.tasks.size());
    out.config = j.value("config", json());
    out.details = j.value("details", json());
    r = std::move(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad report: ") + e.what());
  }
}

std::string report_table(const Report& report) {
  std::size_t name_width = std::string("reference").size();
  for (const auto* rows : {&report.methods, &report.references}) {
    for (const ReportRow& r : *rows) name_width = std::max(name_width, r.name.size());
  }
  std::vector<std::size_t> widths;
  for (const std::string& t : report.tasks) widths.push_back(std::max<std::size_t>(t.size(), 8));
  widths.push_back(8);

  auto pad_left = [](const std::string& s, std::size_t w) { return std::string(w - std::min(w, s.size()), ' ') + s; };
  auto pad_right = [](const std::string& s, std::size_t w) { return s + std::string(w - std::min(w, s.size()), ' '); };
  auto header = [&](const std::string& first) {
    std::string line = pad_right(first, name_width);
    for (std::size_t i = 0; i < report.tasks.size(); ++i) line += "  " + pad_left(report.tasks[i], widths[i]);
    line += "  " + pad_left("Avg", widths.back());
    return line + "\n";
  };
  auto row = [&](const ReportRow& r) {
    std::string line = pad_right(r.name, name_width);
    char buf[64];
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.4f", r.losses[i]);
      line += "  " + pad_left(buf, widths[i]);
    }
    std::snprintf(buf, sizeof buf, "%.4f", r.avg);
    line += "  " + pad_left(buf, widths.back());
    return line + "\n";
  };

  std::string out = header("method");
  for (const ReportRow& r : report.methods) out += row(r);
  if (!report.references.empty()) {
    out += "\n" + header("reference");
    for (const ReportRow& r : report.references) out += row(r);
  }
  return out;
}

void emit_report(const Report& report, const std::filesystem::path& dir) {
  write_text(dir / "report.json", json(report).dump(2) + "\n");
  write_text(dir / "report.txt", report_table(report));
}

PipelineResult run_pipeline(const PipelineConfig& config, const std::filesystem::path& workspace) {
  in_stage("config", [&] { config.validate(); });
  PipelineResult result;
  auto timed = [&](const std::string& stage, auto&& f) {
    const auto start = std::chrono::steady_clock::now();
    in_stage(stage, f);
    result.timing.push_back({stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
  };

  Fabrication fab;
  timed("fabricate", [&] { fab = fabricate(config, workspace); });
  result.fabrication_cached = fab.cached;

  Report& report = result.report;
  for (const TaskData& t : fab.tasks) report.tasks.push_back(t.name);
  report.config = config;
  report.details = json::object();
  timed("references", [&] {
    report.references.push_back(make_row("base", eval_model(fab.base, config.model, fab.tasks)));
    for (std::size_t e = 0; e < fab.experts.size(); ++e) {
      report.references.push_back(make_row("expert:" + fab.tasks[e].name, fab.expert_losses[e]));
    }
  });

  const std::filesystem::path out_dir = workspace / config.output;
  std::vector<std::vector<TokenBatch>> train, eval;
  for (const TaskData& t : fab.tasks) {
    train.push_back(t.train);
    eval.push_back(t.eval);
  }
  std::optional<ExpertLogitCache> logit_cache;

  for (const MethodSpec& m : config.methods) {
    timed("method " + m.name, [&] {
      const std::string stem = file_stem(m.name);
      WeightMap merged;
      switch (m.kind) {
        case MethodKind::kRecipe:
          merged = execute_recipe(m.recipe, &fab.base, fab.experts);
          break;
        case MethodKind::kDam: {
          if (!logit_cache) logit_cache.emplace(fab.experts, config.model);
          const DamResult r = dam_train(fab.base, fab.experts, train, config.model, m.dam, &*logit_cache);
          merged = bake(fab.base, fab.experts, r.coefficients);
          write_coefficients(r.coefficients, out_dir / "models" / (stem + ".coefficients.safetensors"));
          r.report.write_jsonl(out_dir / "logs" / (stem + ".jsonl"));
          report.details[m.name] = r.report.summary_json();
          break;
        }
        case MethodKind::kEvolve: {
          const EvoResult r = evolve(fab.base, fab.experts, eval, config.model, m.evo);
          merged = bake_genome(r.best, fab.base, fab.experts, m.evo.merge_scope);
          r.write_history_jsonl(out_dir / "logs" / (stem + ".jsonl"));
          const auto subset = fitness_data(eval, m.evo);
          const Genome uniform = uniform_genome(genome_row_count(fab.base, m.evo.merge_scope), fab.experts.size());
          json history = json::array();
          for (const GenerationRecord& g : r.history) history.push_back(g.best);
          report.details[m.name] = {
              {"config", m.evo},
              {"best_fitness", r.best_fitness},
              {"uniform_fitness", fitness(uniform, fab.base, fab.experts, subset, config.model, m.evo.merge_scope)},
              {"best_history", history},
              {"best_genome", r.best}};
          break;
        }
      }
      write_checkpoint(merged, out_dir / "models" / (stem + ".safetensors"));
      report.methods.push_back(make_row(m.name, eval_model(merged, config.model, fab.tasks)));
    });
  }
  timed("report", [&] { emit_report(report, out_dir); });
  return result;
}

}  // namespace mergeforge

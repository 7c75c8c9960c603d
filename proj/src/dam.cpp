// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/dam.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace mergeforge {

namespace {

template <typename E>
E parse_enum(const std::string& text, std::initializer_list<E> values, const char* what) {
  for (E v : values) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + text + "'");
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, sep)) out.push_back(part);
  return out;
}

nlohmann::json breakdown_json(const ObjectiveBreakdown& b) {
  return {{"total", b.total}, {"task", b.task}, {"cosine", b.cosine}, {"l1", b.l1}, {"l2", b.l2}};
}

TokenBatch concat(std::span<const TokenBatch> parts) {
  TokenBatch out;
  out.affinity = parts.front().affinity;
  for (const TokenBatch& p : parts) {
    if (p.affinity != out.affinity) throw ConfigError("a dataset mixes affinities");
    out.sequences.insert(out.sequences.end(), p.sequences.begin(), p.sequences.end());
  }
  return out;
}

std::string describe(const ObjectiveBreakdown& b) {
  std::ostringstream os;
  os << "total=" << b.total << " task=" << b.task << " cosine=" << b.cosine << " l1=" << b.l1 << " l2=" << b.l2;
  return os.str();
}

}  // namespace

std::string to_string(DamLoss v) {
  switch (v) {
    case DamLoss::kKl:
      return "kl";
    case DamLoss::kMse:
      return "mse";
    case DamLoss::kEntropy:
      return "entropy";
  }
  return "kl";
}

std::string to_string(DamOptimizer v) { return v == DamOptimizer::kAdam ? "adam" : "sgd"; }

std::string to_string(DamInit v) {
  switch (v) {
    case DamInit::kUniform:
      return "uniform_1_over_N";
    case DamInit::kOnes:
      return "ones";
    case DamInit::kRandom:
      return "random";
  }
  return "uniform_1_over_N";
}

std::string to_string(KlDirection v) { return v == KlDirection::kMergedFirst ? "merged_first" : "expert_first"; }

void DamConfig::validate() const {
  for (double lambda : {lambda_cosine, lambda_l1, lambda_l2}) {
    if (!std::isfinite(lambda) || lambda < 0.0) throw ConfigError("penalty weights must be finite and >= 0");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(init_sigma >= 0.0) || !std::isfinite(init_sigma)) throw ConfigError("init_sigma must be >= 0");
  if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) throw ConfigError("grad_clip must be >= 0");
}

void to_json(nlohmann::json& j, const DamConfig& c) {
  j = nlohmann::json{{"loss", to_string(c.loss)},
                     {"lambda_cosine", c.lambda_cosine},
                     {"lambda_l1", c.lambda_l1},
                     {"lambda_l2", c.lambda_l2},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"seed", c.seed},
                     {"merge_scope", to_string(c.merge_scope)},
                     {"optimizer", to_string(c.optimizer)},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"init", to_string(c.init)},
                     {"init_sigma", c.init_sigma},
                     {"kl_direction", to_string(c.kl_direction)},
                     {"grad_clip", c.grad_clip},
                     {"probe_batches", c.probe_batches}};
}

void from_json(const nlohmann::json& j, DamConfig& c) {
  if (!j.is_object()) throw ConfigError("dam config must be a JSON object");
  static const std::vector<std::string> known = {
      "objective",  "loss",       "lambda_cosine", "lambda_l1", "lambda_l2",    "learning_rate", "batch_size",
      "steps",      "seed",       "merge_scope",   "optimizer", "adam_beta1",   "adam_beta2",    "adam_eps",
      "init",       "init_sigma", "kl_direction",  "grad_clip", "probe_batches", "name"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown dam config field '" + key + "'");
    }
  }
  try {
    DamConfig d;
    d.lambda_cosine = j.value("lambda_cosine", 0.0);
    d.lambda_l1 = j.value("lambda_l1", 0.0);
    d.lambda_l2 = j.value("lambda_l2", 0.0);
    if (j.contains("objective")) {
      if (j.contains("loss")) throw ConfigError("give either objective or loss, not both");
      d = apply_objective(d, j.at("objective").get<std::string>());
    } else {
      d.loss = parse_enum(j.value("loss", std::string("kl")), {DamLoss::kKl, DamLoss::kMse, DamLoss::kEntropy},
                          "loss");
    }
    d.learning_rate = j.value("learning_rate", d.learning_rate);
    d.batch_size = j.value("batch_size", d.batch_size);
    d.steps = j.value("steps", d.steps);
    d.seed = j.value("seed", d.seed);
    d.merge_scope = parse_merge_scope(j.value("merge_scope", to_string(d.merge_scope)));
    d.optimizer = parse_enum(j.value("optimizer", to_string(d.optimizer)), {DamOptimizer::kAdam, DamOptimizer::kSgd},
                             "optimizer");
    d.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    d.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    d.adam_eps = j.value("adam_eps", d.adam_eps);
    d.init = parse_enum(j.value("init", to_string(d.init)), {DamInit::kUniform, DamInit::kOnes, DamInit::kRandom},
                        "init");
    d.init_sigma = j.value("init_sigma", d.init_sigma);
    d.kl_direction = parse_enum(j.value("kl_direction", to_string(d.kl_direction)),
                                {KlDirection::kMergedFirst, KlDirection::kExpertFirst}, "kl_direction");
    d.grad_clip = j.value("grad_clip", d.grad_clip);
    d.probe_batches = j.value("probe_batches", d.probe_batches);
    d.validate();
    c = d;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dam config: ") + e.what());
  }
}

const std::vector<std::string>& ablation_rows() {
  static const std::vector<std::string> rows = {"kl",         "kl+reg",  "kl+cosine",     "kl+cosine+reg",
                                                "mse+cosine", "entropy", "entropy+cosine"};
  return rows;
}

DamConfig apply_objective(DamConfig config, const std::string& objective) {
  const std::vector<std::string> parts = split(objective, '+');
  if (parts.empty()) throw ConfigError("empty objective");
  config.loss = parse_enum(parts[0], {DamLoss::kKl, DamLoss::kMse, DamLoss::kEntropy}, "loss");
  bool cosine = false, reg = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i] == "cosine" && !cosine) {
      cosine = true;
    } else if (parts[i] == "reg" && !reg) {
      reg = true;
    } else {
      throw ConfigError("cannot parse objective '" + objective + "'");
    }
  }
  if (!cosine) {
    config.lambda_cosine = 0.0;
  } else if (config.lambda_cosine == 0.0) {
    config.lambda_cosine = kDefaultLambdaCosine;
  }
  if (!reg) {
    config.lambda_l1 = config.lambda_l2 = 0.0;
  } else if (config.lambda_l1 == 0.0 && config.lambda_l2 == 0.0) {
    config.lambda_l1 = kDefaultLambdaL1;
    config.lambda_l2 = kDefaultLambdaL2;
  }
  return config;
}

std::string objective_name(const DamConfig& config) {
  std::string name = to_string(config.loss);
  if (config.lambda_cosine > 0.0) name += "+cosine";
  if (config.lambda_l1 > 0.0 || config.lambda_l2 > 0.0) name += "+reg";
  return name;
}

CoefficientSet init_coefficients(const WeightMap& base, std::span<const WeightMap> models, const DamConfig& config) {
  config.validate();
  if (models.empty()) throw ConfigError("DAM needs at least one model");
  std::vector<WeightMap> all(models.begin(), models.end());
  all.push_back(base);
  require_compatible(all);
  const std::size_t n = models.size();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Rounded through f32 so the baked soup matches linear_merge bit for bit.
  const double uniform = static_cast<double>(1.0f / static_cast<float>(n));
  CoefficientSet out;
  out.num_models = n;
  for (const auto& [name, tensor] : base.tensors) {
    if (!in_scope(name, config.merge_scope)) continue;
    std::vector<Parameter<double>> per_model(n);
    for (auto& p : per_model) {
      p.value = TensorD({tensor.last_dim()});
      for (double& v : p.value.storage()) {
        switch (config.init) {
          case DamInit::kUniform:
            v = uniform;
            break;
          case DamInit::kOnes:
            v = 1.0;
            break;
          case DamInit::kRandom:
            v = 1.0 / static_cast<double>(n) + config.init_sigma * noise(rng);
            break;
        }
      }
    }
    out.layers.emplace(name, std::move(per_model));
  }
  if (out.layers.empty()) throw ConfigError("merge scope selects no tensors");
  return out;
}

CoefficientSet selector_coefficients(const WeightMap& base, std::size_t num_models, std::size_t k, MergeScope scope) {
  if (k >= num_models) throw ConfigError("selected model out of range");
  CoefficientSet out;
  out.num_models = num_models;
  for (const auto& [name, tensor] : base.tensors) {
    if (!in_scope(name, scope)) continue;
    std::vector<Parameter<double>> per_model(num_models);
    for (std::size_t i = 0; i < num_models; ++i) per_model[i].value = TensorD({tensor.last_dim()}, i == k ? 1.0 : 0.0);
    out.layers.emplace(name, std::move(per_model));
  }
  return out;
}

double kl_loss(std::span<const TensorD> merged, std::span<const TensorD> experts, KlDirection direction) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const TensorD& m : merged) vars.push_back(tape.constant(m));
  return kl_loss<double>(vars, experts, direction).value().item();
}

double mse_loss(std::span<const TensorD> merged, std::span<const TensorD> experts) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const TensorD& m : merged) vars.push_back(tape.constant(m));
  return mse_loss<double>(vars, experts).value().item();
}

double entropy_loss(std::span<const TensorD> merged) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const TensorD& m : merged) vars.push_back(tape.constant(m));
  return entropy_loss<double>(vars).value().item();
}

double cosine_penalty(const CoefficientSet& coeffs, double lambda) {
  CoefficientSet copy = coeffs;
  Tape<double> tape;
  auto v = cosine_penalty(tape, copy, lambda);
  return v ? v->value().item() : 0.0;
}

double reg_penalty(const CoefficientSet& coeffs, double lambda_l1, double lambda_l2) {
  CoefficientSet copy = coeffs;
  Tape<double> tape;
  auto [l1, l2] = reg_penalty(tape, copy, lambda_l1, lambda_l2);
  return (l1 ? l1->value().item() : 0.0) + (l2 ? l2->value().item() : 0.0);
}

ExpertLogitCache::ExpertLogitCache(std::span<const WeightMap> models, const TransformerConfig& config)
    : config_(config) {
  for (const WeightMap& m : models) models_.push_back(frozen_params<double>(m));
}

TensorD ExpertLogitCache::logits(const TokenBatch& batch) {
  if (batch.affinity >= models_.size()) {
    throw ConfigError("batch affinity " + std::to_string(batch.affinity) + " has no model");
  }
  auto key = std::make_pair(batch.affinity, batch.sequences);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  Tape<double> tape;
  TensorD value = forward<double>(tape, models_[batch.affinity], config_, batch).value();
  ++computed_;
  cache_.emplace(std::move(key), value);
  return value;
}

CoefficientSummary summarize(const CoefficientSet& coeffs) {
  CoefficientSummary s;
  const std::size_t n = coeffs.num_models;
  s.mean.assign(n, 0.0);
  s.mean_abs.assign(n, 0.0);
  s.min.assign(n, std::numeric_limits<double>::infinity());
  s.max.assign(n, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> count(n, 0);
  for (const auto& [name, per_model] : coeffs.layers) {
    for (std::size_t i = 0; i < n; ++i) {
      for (double v : per_model[i].value.data()) {
        s.mean[i] += v;
        s.mean_abs[i] += std::abs(v);
        s.min[i] = std::min(s.min[i], v);
        s.max[i] = std::max(s.max[i], v);
        ++count[i];
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] == 0) continue;
    s.mean[i] /= static_cast<double>(count[i]);
    s.mean_abs[i] /= static_cast<double>(count[i]);
  }
  return s;
}

nlohmann::json TrainReport::summary_json() const {
  nlohmann::json j;
  j["config"] = config;
  j["objective"] = objective_name(config);
  j["steps_run"] = steps.size();
  j["initial_probe"] = breakdown_json(initial_probe);
  j["final_probe"] = breakdown_json(final_probe);
  if (!steps.empty()) {
    j["first_step"] = breakdown_json(steps.front().objective);
    j["last_step"] = breakdown_json(steps.back().objective);
  }
  j["coefficients"] = {{"mean", summary.mean}, {"mean_abs", summary.mean_abs}, {"min", summary.min},
                       {"max", summary.max}};
  return j;
}

void TrainReport::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const StepRecord& r : steps) {
    nlohmann::json j = breakdown_json(r.objective);
    j["step"] = r.step;
    j["dataset"] = r.dataset;
    out << j.dump() << "\n";
  }
}

DamResult dam_train(const WeightMap& base, std::span<const WeightMap> models,
                    std::span<const std::vector<TokenBatch>> datasets, const TransformerConfig& model_config,
                    const DamConfig& config, ExpertLogitCache* cache) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (datasets.empty()) throw ConfigError("DAM needs at least one dataset");
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    if (datasets[d].empty()) throw ConfigError("dataset " + std::to_string(d) + " is empty");
  }
  DamResult result;
  result.report.config = config;
  result.coefficients = init_coefficients(base, models, config);
  CoefficientSet& coeffs = result.coefficients;
  MergeInputs<double> inputs = make_merge_inputs<double>(base, models);

  std::optional<ExpertLogitCache> local;
  if (cache == nullptr) {
    local.emplace(models, model_config);
    cache = &*local;
  }
  const ExpertLogitsFn<double> expert = [cache](const TokenBatch& b) { return cache->logits(b); };

  auto probe = [&]() {
    ObjectiveBreakdown mean;
    const std::size_t k = std::max<std::size_t>(config.probe_batches, 1);
    for (std::size_t r = 0; r < k; ++r) {
      std::vector<TokenBatch> batches;
      for (const auto& ds : datasets) batches.push_back(ds[r % ds.size()]);
      Tape<double> tape;
      const ObjectiveBreakdown b =
          dam_objective(tape, inputs, coeffs, model_config, config, batches, expert).parts;
      mean.total += b.total / k;
      mean.task += b.task / k;
      mean.cosine += b.cosine / k;
      mean.l1 += b.l1 / k;
      mean.l2 += b.l2 / k;
    }
    return mean;
  };
  result.report.initial_probe = probe();

  std::vector<std::size_t> cursor(datasets.size(), 0);
  auto params = coeffs.parameters();
  std::vector<std::vector<double>> m1(params.size()), m2(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    m1[p].assign(params[p]->value.size(), 0.0);
    m2[p].assign(params[p]->value.size(), 0.0);
  }
  for (std::size_t step = 0; step < config.steps; ++step) {
    const std::size_t d = step % datasets.size();
    std::vector<TokenBatch> parts;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      parts.push_back(datasets[d][cursor[d]]);
      cursor[d] = (cursor[d] + 1) % datasets[d].size();
    }
    const TokenBatch batch = concat(parts);
    Tape<double> tape;
    StepRecord record;
    record.step = step;
    record.dataset = d;
    try {
      Objective<double> obj =
          dam_objective(tape, inputs, coeffs, model_config, config, std::span<const TokenBatch>(&batch, 1), expert);
      record.objective = obj.parts;
      if (!std::isfinite(obj.parts.total)) throw NumericError("non-finite objective");
      tape.backward(obj.total);
    } catch (const NumericError& e) {
      throw NumericError("dam_train failed at step " + std::to_string(step) + " (" + describe(record.objective) +
                         "): " + e.what());
    }
    result.report.steps.push_back(record);

    double scale = 1.0;
    if (config.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (auto* p : params) {
        if (p->has_grad()) norm2 += ops::dot<double>(p->grad.data(), p->grad.data());
      }
      const double norm = std::sqrt(norm2);
      if (norm > config.grad_clip) scale = config.grad_clip / norm;
    }
    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(config.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(config.adam_beta2, t);
    for (std::size_t p = 0; p < params.size(); ++p) {
      Parameter<double>& param = *params[p];
      if (!param.has_grad()) continue;
      for (std::size_t k = 0; k < param.value.size(); ++k) {
        const double g = param.grad[k] * scale;
        if (config.optimizer == DamOptimizer::kSgd) {
          param.value[k] -= config.learning_rate * g;
          continue;
        }
        m1[p][k] = config.adam_beta1 * m1[p][k] + (1.0 - config.adam_beta1) * g;
        m2[p][k] = config.adam_beta2 * m2[p][k] + (1.0 - config.adam_beta2) * g * g;
        const double mhat = m1[p][k] / bc1;
        const double vhat = m2[p][k] / bc2;
        param.value[k] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps);
      }
      param.zero_grad();
      if (!param.value.all_finite()) {
        throw NumericError("dam_train produced non-finite coefficients at step " + std::to_string(step));
      }
    }
  }
  result.report.final_probe = config.steps == 0 ? result.report.initial_probe : probe();
  result.report.summary = summarize(coeffs);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

WeightMap bake(const WeightMap& base, std::span<const WeightMap> models, const CoefficientSet& coeffs) {
  if (coeffs.num_models != models.size()) {
    throw ConfigError("coefficients are for " + std::to_string(coeffs.num_models) + " models, got " +
                      std::to_string(models.size()));
  }
  std::vector<WeightMap> all(models.begin(), models.end());
  all.push_back(base);
  require_compatible(all);
  for (const auto& [name, per_model] : coeffs.layers) {
    if (!base.contains(name)) throw IncompatibleModelsError("coefficients name unknown tensor '" + name + "'");
  }
  WeightMap out;
  out.metadata = base.metadata;
  out.metadata.erase(kWidenedMetadataKey);
  for (const auto& [name, base_tensor] : base.tensors) {
    auto it = coeffs.layers.find(name);
    if (it == coeffs.layers.end()) {
      out.tensors.emplace(name, base_tensor);
      continue;
    }
    const std::size_t cols = base_tensor.last_dim();
    std::vector<std::vector<double>> c(models.size());
    for (std::size_t i = 0; i < models.size(); ++i) {
      const TensorD& v = it->second.at(i).value;
      if (v.size() != cols) {
        throw ShapeError("coefficients for '" + name + "' have length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(cols));
      }
      for (double x : v.data()) c[i].push_back(static_cast<double>(static_cast<float>(x)));
    }
    Tensor merged(base_tensor.shape());
    for (std::size_t k = 0; k < merged.size(); ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < models.size(); ++i) {
        acc += c[i][k % cols] * static_cast<double>(models[i].at(name)[k]);
      }
      merged[k] = static_cast<float>(acc);
    }
    out.tensors.emplace(name, std::move(merged));
  }
  return out;
}

WeightMap coefficients_to_weights(const CoefficientSet& coeffs) {
  WeightMap w;
  for (const auto& [name, per_model] : coeffs.layers) {
    for (std::size_t i = 0; i < per_model.size(); ++i) {
      w.tensors.emplace("dam." + name + ".model" + std::to_string(i), per_model[i].value.cast<float>());
    }
  }
  w.metadata["mergeforge.dam.num_models"] = std::to_string(coeffs.num_models);
  return w;
}

CoefficientSet coefficients_from_weights(const WeightMap& weights) {
  CoefficientSet out;
  auto it = weights.metadata.find("mergeforge.dam.num_models");
  if (it == weights.metadata.end()) throw ConfigError("coefficient file lacks mergeforge.dam.num_models");
  try {
    out.num_models = std::stoul(it->second);
  } catch (const std::exception&) {
    throw ConfigError("bad mergeforge.dam.num_models '" + it->second + "'");
  }
  for (const auto& [key, tensor] : weights.tensors) {
    const auto pos = key.rfind(".model");
    if (key.rfind("dam.", 0) != 0 || pos == std::string::npos || pos <= 4) {
      throw ConfigError("unexpected coefficient tensor '" + key + "'");
    }
    const std::string layer = key.substr(4, pos - 4);
    std::size_t model = 0;
    try {
      model = std::stoul(key.substr(pos + 6));
    } catch (const std::exception&) {
      throw ConfigError("unexpected coefficient tensor '" + key + "'");
    }
    if (model >= out.num_models) throw ConfigError("coefficient tensor '" + key + "' names a missing model");
    auto& per_model = out.layers[layer];
    per_model.resize(out.num_models);
    per_model[model].value = tensor.cast<double>();
  }
  for (const auto& [layer, per_model] : out.layers) {
    for (std::size_t i = 0; i < per_model.size(); ++i) {
      if (per_model[i].value.empty()) {
        throw ConfigError("coefficients for '" + layer + "' lack model " + std::to_string(i));
      }
    }
  }
  return out;
}

void write_coefficients(const CoefficientSet& coeffs, const std::filesystem::path& path) {
  write_checkpoint(coefficients_to_weights(coeffs), path);
}

CoefficientSet read_coefficients(const std::filesystem::path& path) {
  return coefficients_from_weights(read_checkpoint(path));
}

}  // namespace mergeforge

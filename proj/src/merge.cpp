// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace mergeforge {

namespace {

TensorD difference(const Tensor& a, const Tensor& b) {
  TensorD out(a.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<double>(a[k]) - static_cast<double>(b[k]);
  return out;
}

Tensor add_delta(const Tensor& base, const TensorD& delta) {
  if (base.shape() != delta.shape()) {
    throw ShapeError("delta shape " + shape_str(delta.shape()) + " does not match base " + shape_str(base.shape()));
  }
  Tensor out(base.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<float>(static_cast<double>(base[k]) + delta[k]);
  return out;
}

void require_models(std::span<const WeightMap> models, std::span<const float> weights) {
  if (models.empty()) throw ConfigError("merge needs at least one model");
  if (weights.size() != models.size()) {
    throw ConfigError("got " + std::to_string(weights.size()) + " weights for " + std::to_string(models.size()) +
                      " models");
  }
  for (float w : weights) {
    if (!std::isfinite(w)) throw ConfigError("merge weights must be finite");
  }
}

void require_with_base(const WeightMap& base, std::span<const WeightMap> models) {
  std::vector<WeightMap> all;
  all.reserve(models.size() + 1);
  all.push_back(base);
  all.insert(all.end(), models.begin(), models.end());
  require_compatible(all);
}

// Names only in the other models are caught by checking each against base.
void require_same_names(const WeightMap& base, std::span<const WeightMap> models) {
  for (std::size_t m = 0; m < models.size(); ++m) {
    for (const auto& [name, t] : models[m].tensors) {
      if (!base.contains(name)) {
        throw IncompatibleModelsError("model " + std::to_string(m) + " has tensor " + name + " missing from base");
      }
    }
  }
}

WeightMap start_from(const WeightMap& base) {
  WeightMap out;
  out.metadata = base.metadata;
  out.metadata.erase(kWidenedMetadataKey);
  return out;
}

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Shared by TIES and DARE-TIES once each model's delta is prepared.
template <typename Prepare>
WeightMap sign_consistent_merge(const WeightMap& base, std::span<const WeightMap> models,
                                std::span<const float> weights, MergeScope scope, Prepare prepare) {
  require_models(models, weights);
  require_with_base(base, models);
  require_same_names(base, models);
  WeightMap out = start_from(base);
  for (const auto& [name, base_tensor] : base.tensors) {
    if (!in_scope(name, scope)) {
      out.tensors.emplace(name, base_tensor);
      continue;
    }
    std::vector<TensorD> deltas;
    deltas.reserve(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
      deltas.push_back(prepare(difference(models[m].at(name), base_tensor), m, name));
    }
    const TensorD signs = ties_elect_sign(deltas);
    out.tensors.emplace(name, add_delta(base_tensor, disjoint_merge(deltas, signs, weights)));
  }
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

TaskVector task_vector(const WeightMap& model, const WeightMap& base, MergeScope scope) {
  const WeightMap pair[] = {base, model};
  require_compatible(pair);
  require_same_names(base, std::span<const WeightMap>(&model, 1));
  TaskVector out;
  for (const auto& [name, base_tensor] : base.tensors) {
    if (in_scope(name, scope)) out.emplace(name, difference(model.at(name), base_tensor));
  }
  return out;
}

WeightMap apply_task_vector(const WeightMap& base, const TaskVector& delta) {
  WeightMap out = start_from(base);
  for (const auto& [name, t] : base.tensors) {
    auto it = delta.find(name);
    out.tensors.emplace(name, it == delta.end() ? t : add_delta(t, it->second));
  }
  for (const auto& [name, d] : delta) {
    if (!base.contains(name)) throw IncompatibleModelsError("task vector tensor " + name + " is not in base");
  }
  return out;
}

WeightMap linear_merge(std::span<const WeightMap> models, std::span<const float> weights) {
  require_models(models, weights);
  require_compatible(models);
  require_same_names(models[0], models);
  WeightMap out = start_from(models[0]);
  for (const auto& [name, first] : models[0].tensors) {
    Tensor merged(first.shape());
    for (std::size_t k = 0; k < merged.size(); ++k) {
      double acc = 0.0;
      for (std::size_t m = 0; m < models.size(); ++m) {
        acc += static_cast<double>(weights[m]) * static_cast<double>(models[m].at(name)[k]);
      }
      merged[k] = static_cast<float>(acc);
    }
    out.tensors.emplace(name, std::move(merged));
  }
  return out;
}

WeightMap linear_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                       MergeScope scope) {
  require_models(models, weights);
  require_with_base(base, models);
  require_same_names(base, models);
  const WeightMap merged = linear_merge(models, weights);
  WeightMap out = start_from(base);
  for (const auto& [name, t] : base.tensors) out.tensors.emplace(name, in_scope(name, scope) ? merged.at(name) : t);
  return out;
}

TSchedule TSchedule::constant(double t) {
  TSchedule s;
  s.kind = Kind::kConstant;
  s.value = t;
  return s;
}

TSchedule TSchedule::u_shape(double lo, double hi) {
  TSchedule s;
  s.kind = Kind::kUShape;
  s.lo = lo;
  s.hi = hi;
  return s;
}

TSchedule TSchedule::per_layer(std::vector<double> values) {
  TSchedule s;
  s.kind = Kind::kPerLayer;
  s.values = std::move(values);
  return s;
}

double TSchedule::at(std::size_t layer, std::size_t num_layers) const {
  if (num_layers == 0 || layer >= num_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range for " + std::to_string(num_layers));
  }
  switch (kind) {
    case Kind::kConstant:
      return value;
    case Kind::kUShape: {
      const double x = num_layers == 1 ? 0.0 : static_cast<double>(layer) / static_cast<double>(num_layers - 1);
      const double u = 2.0 * x - 1.0;
      return lo + (hi - lo) * u * u;
    }
    case Kind::kPerLayer:
      if (values.size() != num_layers) {
        throw ConfigError("per-layer schedule has " + std::to_string(values.size()) + " values for " +
                          std::to_string(num_layers) + " layers");
      }
      return values[layer];
  }
  return value;
}

void to_json(nlohmann::json& j, const TSchedule& s) {
  switch (s.kind) {
    case TSchedule::Kind::kConstant:
      j = s.value;
      break;
    case TSchedule::Kind::kUShape:
      j = "u_shape(" + format_double(s.lo) + ", " + format_double(s.hi) + ")";
      break;
    case TSchedule::Kind::kPerLayer:
      j = s.values;
      break;
  }
}

void from_json(const nlohmann::json& j, TSchedule& s) {
  if (j.is_number()) {
    s = TSchedule::constant(j.get<double>());
  } else if (j.is_array()) {
    std::vector<double> values;
    for (const auto& v : j) {
      if (!v.is_number()) throw ConfigError("t_schedule values must be numbers");
      values.push_back(v.get<double>());
    }
    if (values.empty()) throw ConfigError("t_schedule list is empty");
    s = TSchedule::per_layer(std::move(values));
  } else if (j.is_string()) {
    const std::string text = j.get<std::string>();
    double lo = 0.0, hi = 0.0;
    char tail = 0;
    if (std::sscanf(text.c_str(), " u_shape ( %lf , %lf %c", &lo, &hi, &tail) != 3 || tail != ')') {
      throw ConfigError("cannot parse t_schedule '" + text + "'");
    }
    s = TSchedule::u_shape(lo, hi);
  } else {
    throw ConfigError("t_schedule must be a number, a list or \"u_shape(lo, hi)\"");
  }
}

std::size_t schedule_layer(const std::string& name, std::size_t num_layers) {
  if (auto b = block_index(name)) return *b;
  if (name.rfind("embed", 0) == 0) return 0;
  return num_layers - 1;
}

std::size_t count_blocks(const WeightMap& weights) {
  std::size_t n = 0;
  for (const auto& [name, t] : weights.tensors) {
    if (auto b = block_index(name)) n = std::max(n, *b + 1);
  }
  return std::max<std::size_t>(n, 1);
}

TensorD slerp_delta(const TensorD& delta_a, const TensorD& delta_b, double t) {
  if (delta_a.shape() != delta_b.shape()) {
    throw ShapeError("slerp shapes differ: " + shape_str(delta_a.shape()) + " vs " + shape_str(delta_b.shape()));
  }
  const double na = std::sqrt(ops::dot(delta_a.data(), delta_a.data()));
  const double nb = std::sqrt(ops::dot(delta_b.data(), delta_b.data()));
  TensorD out(delta_a.shape());
  double wa = 1.0 - t, wb = t;
  if (na >= 1e-12 && nb >= 1e-12) {
    const double cosine = std::clamp(ops::dot(delta_a.data(), delta_b.data()) / (na * nb), -1.0, 1.0);
    const double omega = std::acos(cosine);
    // Antiparallel deltas leave the great circle undefined.
    if (omega >= 1e-6 && std::numbers::pi - omega >= 1e-6) {
      const double s = std::sin(omega);
      wa = std::sin((1.0 - t) * omega) / s;
      wb = std::sin(t * omega) / s;
    }
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = wa * delta_a[k] + wb * delta_b[k];
  return out;
}

WeightMap slerp_merge(const WeightMap& base, const WeightMap& model_a, const WeightMap& model_b,
                      const TSchedule& schedule, MergeScope scope) {
  const WeightMap pair[] = {model_a, model_b};
  require_with_base(base, pair);
  require_same_names(base, pair);
  const std::size_t layers = count_blocks(base);
  WeightMap out = start_from(base);
  for (const auto& [name, base_tensor] : base.tensors) {
    if (!in_scope(name, scope)) {
      out.tensors.emplace(name, base_tensor);
      continue;
    }
    const double t = schedule.at(schedule_layer(name, layers), layers);
    // Exact endpoints, independent of the angle arithmetic.
    if (t == 0.0) {
      out.tensors.emplace(name, model_a.at(name));
    } else if (t == 1.0) {
      out.tensors.emplace(name, model_b.at(name));
    } else {
      const TensorD delta =
          slerp_delta(difference(model_a.at(name), base_tensor), difference(model_b.at(name), base_tensor), t);
      out.tensors.emplace(name, add_delta(base_tensor, delta));
    }
  }
  return out;
}

TensorD ties_trim(const TensorD& delta, double density) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must be in (0, 1], got " + format_double(density));
  const std::size_t n = delta.size();
  // The slack keeps products like 0.3 * 10 from rounding up to an extra entry.
  const auto keep = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(density * n - 1e-9)));
  if (keep == n) return delta;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(delta[a]) > std::abs(delta[b]); });
  TensorD out(delta.shape(), 0.0);
  for (std::size_t r = 0; r < keep; ++r) out[order[r]] = delta[order[r]];
  return out;
}

TensorD ties_elect_sign(std::span<const TensorD> deltas) {
  if (deltas.empty()) throw ConfigError("sign election needs at least one delta");
  for (const TensorD& d : deltas) {
    if (d.shape() != deltas[0].shape()) {
      throw ShapeError("sign election shapes differ: " + shape_str(deltas[0].shape()) + " vs " + shape_str(d.shape()));
    }
  }
  TensorD out(deltas[0].shape());
  for (std::size_t k = 0; k < out.size(); ++k) {
    double total = 0.0;
    for (const TensorD& d : deltas) total += d[k];
    out[k] = sign_of(total);
  }
  return out;
}

TensorD disjoint_merge(std::span<const TensorD> deltas, const TensorD& signs, std::span<const float> weights) {
  if (deltas.size() != weights.size()) throw ConfigError("disjoint merge needs one weight per delta");
  for (const TensorD& d : deltas) {
    if (d.shape() != signs.shape()) {
      throw ShapeError("disjoint merge shapes differ: " + shape_str(signs.shape()) + " vs " + shape_str(d.shape()));
    }
  }
  TensorD out(signs.shape(), 0.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const int elected = static_cast<int>(signs[k]);
    if (elected == 0) continue;
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m < deltas.size(); ++m) {
      if (sign_of(deltas[m][k]) != elected) continue;
      num += static_cast<double>(weights[m]) * deltas[m][k];
      den += static_cast<double>(weights[m]);
    }
    out[k] = den != 0.0 ? num / den : 0.0;
  }
  return out;
}

WeightMap ties_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                     double density, MergeScope scope) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must be in (0, 1], got " + format_double(density));
  return sign_consistent_merge(base, models, weights, scope,
                               [&](TensorD delta, std::size_t, const std::string&) { return ties_trim(delta, density); });
}

TensorD dare_sparsify(const TensorD& delta, double drop_p, std::uint64_t seed) {
  if (!(drop_p >= 0.0 && drop_p < 1.0)) throw ConfigError("drop_p must be in [0, 1), got " + format_double(drop_p));
  if (drop_p == 0.0) return delta;
  std::mt19937_64 rng(seed);
  const double rescale = 1.0 / (1.0 - drop_p);
  TensorD out(delta.shape(), 0.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    // 53-bit uniform in [0, 1) from raw engine output, stable across standard libraries.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (u >= drop_p) out[k] = delta[k] * rescale;
  }
  return out;
}

std::uint64_t dare_seed(std::uint64_t recipe_seed, std::size_t model_index, const std::string& name) {
  return splitmix64(splitmix64(recipe_seed ^ splitmix64(model_index + 1)) ^ fnv1a(name));
}

WeightMap dare_ties_merge(const WeightMap& base, std::span<const WeightMap> models, std::span<const float> weights,
                          double drop_p, std::uint64_t seed, MergeScope scope) {
  if (!(drop_p >= 0.0 && drop_p < 1.0)) throw ConfigError("drop_p must be in [0, 1), got " + format_double(drop_p));
  return sign_consistent_merge(base, models, weights, scope,
                               [&](TensorD delta, std::size_t m, const std::string& name) {
                                 return dare_sparsify(delta, drop_p, dare_seed(seed, m, name));
                               });
}

std::string to_string(MergeMethod method) {
  switch (method) {
    case MergeMethod::kSoup:
      return "soup";
    case MergeMethod::kWeighted:
      return "weighted";
    case MergeMethod::kSlerp:
      return "slerp";
    case MergeMethod::kTies:
      return "ties";
    case MergeMethod::kDareTies:
      return "dare_ties";
  }
  return "soup";
}

MergeMethod parse_merge_method(const std::string& text) {
  for (MergeMethod m : {MergeMethod::kSoup, MergeMethod::kWeighted, MergeMethod::kSlerp, MergeMethod::kTies,
                        MergeMethod::kDareTies}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown merge method '" + text + "'");
}

void MergeRecipe::validate(std::size_t num_models) const {
  if (num_models == 0) throw ConfigError("recipe lists no models");
  if (!weights.empty() && weights.size() != num_models) {
    throw ConfigError("recipe has " + std::to_string(weights.size()) + " weights for " + std::to_string(num_models) +
                      " models");
  }
  for (float w : weights) {
    if (!std::isfinite(w)) throw ConfigError("recipe weights must be finite");
  }
  if (method == MergeMethod::kWeighted && weights.empty()) throw ConfigError("weighted merge needs explicit weights");
  if (method == MergeMethod::kSlerp && num_models != 2) {
    throw ConfigError("slerp merges exactly two models, got " + std::to_string(num_models));
  }
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must be in (0, 1]");
  if (!(drop_p >= 0.0 && drop_p < 1.0)) throw ConfigError("drop_p must be in [0, 1)");
  if (t_schedule.kind == TSchedule::Kind::kPerLayer && t_schedule.values.empty()) {
    throw ConfigError("per-layer t_schedule is empty");
  }
}

std::vector<float> MergeRecipe::resolved_weights(std::size_t num_models) const {
  if (!weights.empty() && method != MergeMethod::kSoup) return weights;
  return std::vector<float>(num_models, 1.0f / static_cast<float>(num_models));
}

void to_json(nlohmann::json& j, const MergeRecipe& r) {
  j = nlohmann::json{{"method", to_string(r.method)},
                     {"models", r.models},
                     {"weights", r.weights},
                     {"density", r.density},
                     {"drop_p", r.drop_p},
                     {"t_schedule", r.t_schedule},
                     {"seed", r.seed},
                     {"merge_scope", to_string(r.merge_scope)}};
  if (!r.base.empty()) j["base"] = r.base;
  if (!r.output.empty()) j["output"] = r.output;
}

void from_json(const nlohmann::json& j, MergeRecipe& r) {
  if (!j.is_object()) throw ConfigError("merge recipe must be a JSON object");
  static const char* known[] = {"method", "base",   "models",      "weights", "density",
                                "drop_p", "t_schedule", "seed", "merge_scope", "output"};
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
        std::end(known)) {
      throw ConfigError("unknown merge recipe field '" + key + "'");
    }
  }
  try {
    r = MergeRecipe{};
    r.method = parse_merge_method(j.at("method").get<std::string>());
    r.base = j.value("base", std::string());
    r.models = j.value("models", std::vector<std::string>());
    r.weights = j.value("weights", std::vector<float>());
    r.density = j.value("density", 1.0);
    r.drop_p = j.value("drop_p", 0.0);
    if (j.contains("t_schedule")) r.t_schedule = j.at("t_schedule").get<TSchedule>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.merge_scope = parse_merge_scope(j.value("merge_scope", std::string("linear_only")));
    r.output = j.value("output", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad merge recipe: ") + e.what());
  }
  if (!r.models.empty()) r.validate(r.models.size());
}

WeightMap execute_recipe(const MergeRecipe& recipe, const WeightMap* base, std::span<const WeightMap> models) {
  recipe.validate(models.size());
  const std::vector<float> weights = recipe.resolved_weights(models.size());
  const bool linear = recipe.method == MergeMethod::kSoup || recipe.method == MergeMethod::kWeighted;
  if (base == nullptr && !(linear && recipe.merge_scope == MergeScope::kAll)) {
    throw ConfigError(to_string(recipe.method) + " merge with scope " + to_string(recipe.merge_scope) +
                      " needs a base model");
  }
  WeightMap out;
  switch (recipe.method) {
    case MergeMethod::kSoup:
    case MergeMethod::kWeighted:
      out = base == nullptr ? linear_merge(models, weights) : linear_merge(*base, models, weights, recipe.merge_scope);
      break;
    case MergeMethod::kSlerp:
      out = slerp_merge(*base, models[0], models[1], recipe.t_schedule, recipe.merge_scope);
      break;
    case MergeMethod::kTies:
      out = ties_merge(*base, models, weights, recipe.density, recipe.merge_scope);
      break;
    case MergeMethod::kDareTies:
      out = dare_ties_merge(*base, models, weights, recipe.drop_p, recipe.seed, recipe.merge_scope);
      break;
  }
  nlohmann::json record = recipe;
  record.erase("base");
  record.erase("models");
  record.erase("output");
  record["weights"] = weights;
  out.metadata["mergeforge.merge"] = record.dump();
  return out;
}

WeightMap run_recipe(const MergeRecipe& recipe, const std::filesystem::path& root) {
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : root / path;
  };
  std::vector<WeightMap> models;
  for (const std::string& p : recipe.models) models.push_back(read_checkpoint(resolve(p)));
  std::optional<WeightMap> base;
  if (!recipe.base.empty()) base = read_checkpoint(resolve(recipe.base));
  WeightMap out = execute_recipe(recipe, base ? &*base : nullptr, models);
  if (!recipe.output.empty()) write_checkpoint(out, resolve(recipe.output));
  return out;
}

}  // namespace mergeforge

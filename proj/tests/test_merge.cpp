// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "mergeforge/merge.hpp"
#include "test_support.hpp"

using namespace mergeforge;
using Catch::Matchers::WithinAbs;

namespace {

WeightMap single(const std::string& name, Shape shape, std::vector<float> values) {
  WeightMap w;
  w.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
  return w;
}

TensorD vec(std::vector<double> values) {
  const std::size_t n = values.size();
  return TensorD({n}, std::move(values));
}

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.vocab_size = 8;
  c.model_dim = 8;
  c.layers = 3;
  c.heads = 2;
  c.mlp_dim = 16;
  c.max_seq_len = 8;
  return c;
}

// A fine-tuned copy of `base`: every tensor perturbed by seeded noise.
WeightMap perturbed(const WeightMap& base, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, scale);
  WeightMap out = base;
  for (auto& [name, t] : out.tensors) {
    for (float& v : t.storage()) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(double(a[k]) - double(b[k])));
  return worst;
}

}  // namespace

TEST_CASE("task vector examples", "[merge][task_vector]") {
  const WeightMap base = single("w", {2}, {1, 1});
  const WeightMap model = single("w", {2}, {2, 3});
  const TaskVector tv = task_vector(model, base);
  CHECK(tv.at("w") == vec({1, 2}));

  const TaskVector zero = task_vector(base, base);
  for (double v : zero.at("w").data()) CHECK(v == 0.0);
  CHECK(apply_task_vector(base, tv) == model);

  CHECK_THROWS_AS(task_vector(single("w", {3}, {1, 2, 3}), base), IncompatibleModelsError);
}

TEST_CASE("task vectors invert exactly on random models", "[merge][task_vector][property]") {
  const WeightMap base = init_model(tiny_config(), 1);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const WeightMap model = perturbed(base, 100 + trial, trial % 2 == 0 ? 0.1 : 10.0);
    CHECK(apply_task_vector(base, task_vector(model, base)).tensors == model.tensors);
  }
  const TaskVector linear_only = task_vector(perturbed(base, 3), base, MergeScope::kLinearOnly);
  for (const auto& [name, t] : base.tensors) CHECK(linear_only.count(name) == (is_linear_name(name) ? 1u : 0u));
}

TEST_CASE("linear merge examples", "[merge][linear]") {
  const WeightMap w1 = single("w", {2, 2}, {2, 0, 0, 2});
  const WeightMap w2 = single("w", {2, 2}, {0, 4, 4, 0});
  const WeightMap pair[] = {w1, w2};
  const float half[] = {0.5f, 0.5f};
  CHECK(linear_merge(pair, half).at("w") == Tensor({2, 2}, {1, 2, 2, 1}));

  const float selector[] = {1.0f, 0.0f};
  CHECK(linear_merge(pair, selector).tensors == w1.tensors);

  const WeightMap model = init_model(tiny_config(), 4);
  const std::vector<WeightMap> same(3, model);
  const float third = 1.0f / 3.0f;
  const float uniform[] = {third, third, third};
  // Three copies summed at weight fl(1/3) are within one rounding of the model.
  const WeightMap soup = linear_merge(same, uniform);
  for (const auto& [name, t] : model.tensors) CHECK(max_abs_diff(soup.at(name), t) <= 1e-6 * 8);
  const std::vector<WeightMap> two(2, model);
  CHECK(linear_merge(two, half).tensors == model.tensors);

  CHECK_THROWS_AS(linear_merge(std::span<const WeightMap>(), std::span<const float>()), ConfigError);
  CHECK_THROWS_AS(linear_merge(pair, std::span<const float>(half, 1)), ConfigError);
  const WeightMap odd[] = {w1, single("w", {4}, {1, 2, 3, 4})};
  CHECK_THROWS_AS(linear_merge(odd, half), IncompatibleModelsError);
}

TEST_CASE("linear merge is permutation invariant", "[merge][linear][property]") {
  const WeightMap base = init_model(tiny_config(), 2);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<WeightMap> models;
    std::vector<float> weights;
    for (int m = 0; m < 3; ++m) {
      models.push_back(perturbed(base, rng()));
      weights.push_back(std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng));
    }
    std::vector<std::size_t> perm = {2, 0, 1};
    std::vector<WeightMap> pm;
    std::vector<float> pw;
    for (std::size_t p : perm) {
      pm.push_back(models[p]);
      pw.push_back(weights[p]);
    }
    const WeightMap a = linear_merge(models, weights);
    const WeightMap b = linear_merge(pm, pw);
    for (const auto& [name, t] : a.tensors) CHECK(max_abs_diff(t, b.at(name)) <= 1e-6);
  }
}

TEST_CASE("linear_only scope copies non-linear tensors from base", "[merge][scope][property]") {
  const WeightMap base = init_model(tiny_config(), 5);
  const std::vector<WeightMap> models = {perturbed(base, 6), perturbed(base, 7)};
  const float w[] = {0.5f, 0.5f};
  const std::vector<WeightMap> merged = {
      linear_merge(base, models, w, MergeScope::kLinearOnly),
      slerp_merge(base, models[0], models[1], TSchedule::constant(0.3), MergeScope::kLinearOnly),
      ties_merge(base, models, w, 0.5, MergeScope::kLinearOnly),
      dare_ties_merge(base, models, w, 0.3, 11, MergeScope::kLinearOnly),
  };
  for (const WeightMap& m : merged) {
    const WeightMap check[] = {base, m};
    CHECK(validate_compatible(check).empty());
    CHECK(m.tensors.size() == base.tensors.size());
    for (const auto& [name, t] : base.tensors) {
      if (is_linear_name(name)) {
        CHECK_FALSE(m.at(name) == t);
      } else {
        CHECK(m.at(name) == t);
      }
    }
  }
}

TEST_CASE("slerp examples", "[merge][slerp]") {
  const WeightMap base = init_model(tiny_config(), 8);
  const WeightMap a = perturbed(base, 9);
  const WeightMap b = perturbed(base, 10);
  CHECK(slerp_merge(base, a, b, TSchedule::constant(0.0)).tensors == a.tensors);
  CHECK(slerp_merge(base, a, b, TSchedule::constant(1.0)).tensors == b.tensors);

  // Orthogonal unit deltas: Ω = π/2, weights sin(π/4) / sin(π/2) = √2/2.
  const TensorD da = vec({1, 0, 0}), db = vec({0, 1, 0});
  const TensorD mid = slerp_delta(da, db, 0.5);
  CHECK_THAT(mid[0], WithinAbs(std::sqrt(2.0) / 2.0, 1e-12));
  CHECK_THAT(mid[1], WithinAbs(std::sqrt(2.0) / 2.0, 1e-12));
  CHECK(mid[2] == 0.0);
  CHECK_THAT(std::sqrt(ops::dot(mid.data(), mid.data())), WithinAbs(1.0, 1e-12));

  const WeightMap mb = single("layers.0.attn.q", {3}, {1, 1, 1});
  const WeightMap ma_model = single("layers.0.attn.q", {3}, {2, 1, 1});
  const WeightMap mb_model = single("layers.0.attn.q", {3}, {1, 2, 1});
  const Tensor merged = slerp_merge(mb, ma_model, mb_model, TSchedule::constant(0.5)).at("layers.0.attn.q");
  CHECK_THAT(merged[0], WithinAbs(1.0 + std::sqrt(2.0) / 2.0, 1e-6));
  CHECK_THAT(merged[1], WithinAbs(1.0 + std::sqrt(2.0) / 2.0, 1e-6));
  CHECK(merged[2] == 1.0f);

  // Parallel deltas and a zero delta fall back to linear interpolation.
  const TensorD par = slerp_delta(vec({1, 2}), vec({2, 4}), 0.25);
  CHECK_THAT(par[0], WithinAbs(1.25, 1e-15));
  CHECK_THAT(par[1], WithinAbs(2.5, 1e-15));
  const TensorD zero = slerp_delta(vec({0, 0}), vec({2, 4}), 0.25);
  CHECK_THAT(zero[0], WithinAbs(0.5, 1e-15));
  CHECK_THAT(zero[1], WithinAbs(1.0, 1e-15));
}

TEST_CASE("t schedules", "[merge][slerp]") {
  const TSchedule u = TSchedule::u_shape(0.2, 0.8);
  CHECK_THAT(u.at(0, 3), WithinAbs(0.8, 1e-15));
  CHECK_THAT(u.at(1, 3), WithinAbs(0.2, 1e-15));
  CHECK_THAT(u.at(2, 3), WithinAbs(0.8, 1e-15));
  // x = 1/4: 0.2 + 0.6 * (−0.5)² = 0.35.
  CHECK_THAT(u.at(1, 5), WithinAbs(0.35, 1e-15));
  for (std::size_t l = 0; l < 5; ++l) CHECK(u.at(l, 5) == u.at(4 - l, 5));

  CHECK(TSchedule::per_layer({0.1, 0.2}).at(1, 2) == 0.2);
  CHECK_THROWS_AS(TSchedule::per_layer({0.1, 0.2}).at(0, 3), ConfigError);

  CHECK(schedule_layer("embed.tok", 4) == 0);
  CHECK(schedule_layer("layers.2.mlp.up", 4) == 2);
  CHECK(schedule_layer("final_norm.g", 4) == 3);
  CHECK(schedule_layer("lm_head", 4) == 3);

  for (const nlohmann::json& j : {nlohmann::json(0.5), nlohmann::json("u_shape(0.25, 0.75)"),
                                  nlohmann::json(std::vector<double>{0.1, 0.9})}) {
    const TSchedule s = j.get<TSchedule>();
    CHECK(nlohmann::json(s).get<TSchedule>().at(1, 2) == s.at(1, 2));
  }
  CHECK(nlohmann::json("u_shape(0.25, 0.75)").get<TSchedule>().lo == 0.25);
  CHECK_THROWS_AS(nlohmann::json("v_shape(1, 2)").get<TSchedule>(), ConfigError);

  // The schedule reaches each block: t = 0 at block 0 and t = 1 at block 1.
  TransformerConfig c = tiny_config();
  c.layers = 2;
  const WeightMap base = init_model(c, 12);
  const WeightMap a = perturbed(base, 13), b = perturbed(base, 14);
  const WeightMap m = slerp_merge(base, a, b, TSchedule::per_layer({0.0, 1.0}));
  CHECK(m.at("layers.0.attn.q") == a.at("layers.0.attn.q"));
  CHECK(m.at("layers.1.attn.q") == b.at("layers.1.attn.q"));
  CHECK(m.at("lm_head") == b.at("lm_head"));
  CHECK(m.at("embed.tok") == a.at("embed.tok"));
}

TEST_CASE("ties trim examples", "[merge][ties]") {
  CHECK(ties_trim(vec({3, -1, 0.5, -2}), 1.0) == vec({3, -1, 0.5, -2}));
  CHECK(ties_trim(vec({3, -1, 0.5, -2}), 0.5) == vec({3, 0, 0, -2}));
  CHECK(ties_trim(vec({0, 0, 0}), 0.5) == vec({0, 0, 0}));
  // Ties at the threshold keep the lower index.
  CHECK(ties_trim(vec({1, -1, 1, -1}), 0.5) == vec({1, -1, 0, 0}));
  CHECK(ties_trim(vec({1, 2, 2, 1}), 0.25) == vec({0, 2, 0, 0}));
  // ceil(0.3 · 10) = 3 entries, not 4.
  TensorD ten({10});
  for (std::size_t k = 0; k < 10; ++k) ten[k] = double(k + 1);
  const TensorD kept = ties_trim(ten, 0.3);
  CHECK(std::count_if(kept.data().begin(), kept.data().end(), [](double v) { return v != 0.0; }) == 3);
  CHECK_THROWS_AS(ties_trim(ten, 0.0), ConfigError);
  CHECK_THROWS_AS(ties_trim(ten, 1.5), ConfigError);
}

TEST_CASE("ties trim keeps the largest entries", "[merge][ties][property]") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const TensorD d = testing::random_tensor<double>({17}, rng);
    const double density = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const TensorD t = ties_trim(d, density);
    std::vector<double> mags;
    for (double v : d.data()) mags.push_back(std::abs(v));
    std::sort(mags.rbegin(), mags.rend());
    const auto keep = static_cast<std::size_t>(std::ceil(density * 17 - 1e-9));
    std::size_t nonzero = 0;
    for (std::size_t k = 0; k < 17; ++k) {
      if (t[k] != 0.0) {
        ++nonzero;
        CHECK(t[k] == d[k]);
        CHECK(std::abs(d[k]) >= mags[keep - 1]);
      }
    }
    CHECK(nonzero == keep);
  }
}

TEST_CASE("ties sign election examples", "[merge][ties]") {
  const TensorD pair[] = {vec({3, 0, 0, -2}), vec({-1, 2, 0, -1})};
  CHECK(ties_elect_sign(pair) == vec({1, 1, 0, -1}));
  const TensorD one[] = {vec({-0.5, 0, 2})};
  CHECK(ties_elect_sign(one) == vec({-1, 0, 1}));
  const TensorD opposite[] = {vec({1, -2}), vec({-1, 2})};
  CHECK(ties_elect_sign(opposite) == vec({0, 0}));
  const TensorD bad[] = {vec({1}), vec({1, 2})};
  CHECK_THROWS_AS(ties_elect_sign(bad), ShapeError);
}

TEST_CASE("ties merge examples", "[merge][ties]") {
  const WeightMap base = single("w", {4}, {1, 1, 1, 1});
  const WeightMap a = single("w", {4}, {4, 1, 1, -1});  // delta [3, 0, 0, -2]
  const WeightMap b = single("w", {4}, {1, 3, 2, 1});   // delta [0, 2, 1, 0]
  const float one_w[] = {0.7f};
  CHECK(ties_merge(base, std::span<const WeightMap>(&a, 1), one_w, 1.0).tensors == a.tensors);

  // Disjoint supports after trim at 0.5: the merge is the union of deltas.
  const WeightMap pair[] = {a, b};
  const float w[] = {0.5f, 0.5f};
  CHECK(ties_merge(base, pair, w, 0.5).at("w") == Tensor({4}, {4, 3, 2, -1}));

  // Elected sign 0 keeps base.
  const WeightMap up = single("w", {4}, {2, 2, 2, 2});
  const WeightMap down = single("w", {4}, {0, 0, 0, 0});
  const WeightMap cancel[] = {up, down};
  CHECK(ties_merge(base, cancel, w, 1.0).at("w") == base.at("w"));
}

TEST_CASE("ties merge matches a brute-force pipeline", "[merge][ties][property]") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const TensorD b0 = testing::random_tensor<double>({4}, rng);
    std::vector<TensorD> ds;
    for (int m = 0; m < 3; ++m) ds.push_back(testing::random_tensor<double>({4}, rng));
    const std::vector<float> w = {0.2f, 0.3f, 0.5f};
    const double density = 0.5;

    // Oracle: trim by full sort, then per position elect and average.
    std::vector<std::vector<double>> trimmed;
    for (const TensorD& d : ds) {
      std::vector<std::pair<double, int>> order;
      for (int k = 0; k < 4; ++k) order.push_back({-std::abs(d[k]), k});
      std::sort(order.begin(), order.end());
      std::vector<double> t(4, 0.0);
      for (int r = 0; r < 2; ++r) t[order[r].second] = d[order[r].second];
      trimmed.push_back(t);
    }
    WeightMap base;
    base.tensors.emplace("w", b0.cast<float>());
    std::vector<WeightMap> models;
    for (const TensorD& d : ds) {
      WeightMap m;
      Tensor t(Shape{4});
      for (int k = 0; k < 4; ++k) t[k] = static_cast<float>(double(base.at("w")[k]) + d[k]);
      m.tensors.emplace("w", t);
      models.push_back(m);
    }
    const Tensor got = ties_merge(base, models, w, density).at("w");
    for (int k = 0; k < 4; ++k) {
      double total = 0.0;
      for (auto& t : trimmed) total += t[k];
      const int s = (total > 0) - (total < 0);
      double num = 0.0, den = 0.0;
      for (int m = 0; m < 3; ++m) {
        if (((trimmed[m][k] > 0) - (trimmed[m][k] < 0)) == s && s != 0) {
          num += w[m] * trimmed[m][k];
          den += w[m];
        }
      }
      const double expected = double(base.at("w")[k]) + (den > 0 ? num / den : 0.0);
      CHECK_THAT(got[k], WithinAbs(expected, 1e-6));
    }
  }
}

TEST_CASE("dare sparsify examples", "[merge][dare]") {
  CHECK(dare_sparsify(vec({2, 4}), 0.0, 99) == vec({2, 4}));
  // Seed 3 draws keep, drop for the two entries.
  CHECK(dare_sparsify(vec({2, 4}), 0.5, 3) == vec({4, 0}));
  CHECK(dare_sparsify(vec({2, 4}), 0.5, 3) == dare_sparsify(vec({2, 4}), 0.5, 3));
  CHECK_THROWS_AS(dare_sparsify(vec({1}), 1.0, 0), ConfigError);
  CHECK_THROWS_AS(dare_sparsify(vec({1}), -0.1, 0), ConfigError);

  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) total += dare_sparsify(vec({1}), 0.9, seed)[0];
  CHECK_THAT(total / 10000.0, WithinAbs(1.0, 0.05));
}

TEST_CASE("dare sparsify is unbiased per entry", "[merge][dare][property]") {
  const TensorD d = vec({1.0, -2.0, 0.5, 3.0});
  for (double p : {0.1, 0.5, 0.8}) {
    std::vector<double> sums(4, 0.0);
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
      const TensorD s = dare_sparsify(d, p, 1000003 * seed + 17);
      for (int k = 0; k < 4; ++k) sums[k] += s[k];
    }
    for (int k = 0; k < 4; ++k) CHECK(std::abs(sums[k] / 10000.0 - d[k]) <= 0.05 * std::abs(d[k]));
  }
}

TEST_CASE("dare-ties examples", "[merge][dare_ties]") {
  const WeightMap base = init_model(tiny_config(), 15);
  const WeightMap a = perturbed(base, 16), b = perturbed(base, 17);
  const float one_w[] = {1.0f};
  CHECK(dare_ties_merge(base, std::span<const WeightMap>(&a, 1), one_w, 0.0, 5).tensors == a.tensors);
  const WeightMap pair[] = {a, b};
  const float w[] = {0.4f, 0.6f};
  CHECK(dare_ties_merge(base, pair, w, 0.0, 5).tensors == ties_merge(base, pair, w, 1.0).tensors);
  CHECK_FALSE(dare_ties_merge(base, pair, w, 0.5, 5).tensors == dare_ties_merge(base, pair, w, 0.5, 6).tensors);
}

TEST_CASE("dare-ties fixed-seed fixture replays step by step", "[merge][dare_ties]") {
  const WeightMap base = single("w", {4}, {0, 0, 0, 0});
  const WeightMap a = single("w", {4}, {3, 0, 0, -2});
  const WeightMap b = single("w", {4}, {-1, 2, 0, -1});
  const WeightMap pair[] = {a, b};
  const float w[] = {0.5f, 0.5f};
  const std::uint64_t seed = 13;

  // Replay: draw each model's mask from its derived seed, rescale by 2,
  // elect signs, average the agreeing survivors.
  std::vector<std::vector<double>> sparse;
  for (std::size_t m = 0; m < 2; ++m) {
    std::mt19937_64 rng(dare_seed(seed, m, "w"));
    std::vector<double> s(4, 0.0);
    for (int k = 0; k < 4; ++k) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      if (u >= 0.5) s[k] = 2.0 * pair[m].at("w")[k];
    }
    sparse.push_back(s);
  }
  CHECK(sparse[0] == std::vector<double>{6, 0, 0, -4});
  CHECK(sparse[1] == std::vector<double>{-2, 4, 0, 0});
  // Signs [+, +, 0, −]; each position has a single agreeing survivor.
  CHECK(dare_ties_merge(base, pair, w, 0.5, seed).at("w") == Tensor({4}, {6, 4, 0, -4}));

  // Seeds differ across models and tensors.
  CHECK(dare_seed(13, 0, "w") != dare_seed(13, 1, "w"));
  CHECK(dare_seed(13, 0, "w") != dare_seed(13, 0, "v"));
}

TEST_CASE("merge recipes", "[merge][recipe]") {
  const auto j = nlohmann::json::parse(R"({
    "method": "ties", "base": "base.safetensors", "models": ["a.safetensors", "b.safetensors"],
    "weights": [0.5, 0.5], "density": 0.4, "seed": 3, "merge_scope": "all", "output": "out.safetensors"
  })");
  const MergeRecipe r = j.get<MergeRecipe>();
  CHECK(r.method == MergeMethod::kTies);
  CHECK(r.density == 0.4);
  CHECK(r.merge_scope == MergeScope::kAll);
  CHECK(nlohmann::json(r).get<MergeRecipe>().models == r.models);
  CHECK(nlohmann::json(r) == nlohmann::json(nlohmann::json(r).get<MergeRecipe>()));

  auto bad = [&](const char* text) { return nlohmann::json::parse(text).get<MergeRecipe>(); };
  CHECK_THROWS_AS(bad(R"({"method": "median", "models": ["a"]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "soup", "models": ["a", "b"], "weights": [1]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "slerp", "models": ["a", "b", "c"]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "ties", "models": ["a"], "density": 0})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "dare_ties", "models": ["a"], "drop_p": 1})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "weighted", "models": ["a"]})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"method": "soup", "models": ["a"], "colour": 1})"), ConfigError);
}

TEST_CASE("run_recipe merges checkpoints on disk", "[merge][recipe]") {
  const auto dir = std::filesystem::temp_directory_path() / "mergeforge_test_merge";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const WeightMap base = init_model(tiny_config(), 18);
  const WeightMap a = perturbed(base, 19), b = perturbed(base, 20);
  write_checkpoint(base, dir / "base.safetensors");
  write_checkpoint(a, dir / "a.safetensors");
  write_checkpoint(b, dir / "b.safetensors");

  MergeRecipe r;
  r.method = MergeMethod::kSoup;
  r.base = "base.safetensors";
  r.models = {"a.safetensors", "b.safetensors"};
  r.output = "soup.safetensors";
  const WeightMap out = run_recipe(r, dir);
  CHECK(read_checkpoint(dir / "soup.safetensors") == out);
  const WeightMap pair[] = {a, b};
  const float w[] = {0.5f, 0.5f};
  CHECK(out.tensors == linear_merge(base, pair, w, MergeScope::kLinearOnly).tensors);
  CHECK(config_from_metadata(out).has_value());
  const auto record = nlohmann::json::parse(out.metadata.at("mergeforge.merge"));
  CHECK(record.at("method") == "soup");
  CHECK(record.at("weights") == nlohmann::json({0.5, 0.5}));

  r.base.clear();
  CHECK_THROWS_AS(run_recipe(r, dir), ConfigError);
  r.merge_scope = MergeScope::kAll;
  CHECK(run_recipe(r, dir).tensors == linear_merge(pair, w).tensors);
  std::filesystem::remove_all(dir);
}

// Copyright 2026 The MergeForge Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "mergeforge/dam.hpp"
#include "mergeforge/merge.hpp"
#include "test_support.hpp"

using namespace mergeforge;
using Catch::Matchers::WithinAbs;

namespace {

TransformerConfig small_config() {
  TransformerConfig c;
  c.vocab_size = 16;
  c.model_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.mlp_dim = 16;
  c.max_seq_len = 16;
  return c;
}

// Expert stand-ins: the base with seeded noise on the linear layers only.
WeightMap perturbed(const WeightMap& base, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, scale);
  WeightMap out = base;
  for (auto& [name, t] : out.tensors) {
    if (!is_linear_name(name)) continue;
    for (float& v : t.storage()) v = static_cast<float>(v + noise(rng));
  }
  return out;
}

TokenBatch random_batch(const TransformerConfig& c, std::size_t len, std::size_t affinity, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> id(0, static_cast<std::int64_t>(c.vocab_size) - 1);
  TokenBatch b;
  b.affinity = affinity;
  b.sequences.emplace_back(len);
  for (auto& t : b.sequences[0]) t = id(rng);
  return b;
}

TensorD row(std::vector<double> v) {
  const std::size_t n = v.size();
  return TensorD({1, n}, std::move(v));
}

struct Fixture {
  TransformerConfig config = small_config();
  WeightMap base = init_model(config, 1);
  std::vector<WeightMap> models = {perturbed(base, 2), perturbed(base, 3)};
};

}  // namespace

TEST_CASE("coefficient initialization", "[dam][init]") {
  Fixture f;
  DamConfig cfg;
  const CoefficientSet c = init_coefficients(f.base, f.models, cfg);
  CHECK(c.num_models == 2);
  std::size_t expected = 0;
  for (const auto& [name, t] : f.base.tensors) {
    if (!is_linear_name(name)) {
      CHECK(c.layers.count(name) == 0);
      continue;
    }
    REQUIRE(c.layers.count(name) == 1);
    for (const auto& p : c.layers.at(name)) {
      CHECK(p.value.shape() == Shape{t.last_dim()});
      for (double v : p.value.data()) CHECK(v == 0.5);
    }
    expected += 2 * t.last_dim();
  }
  CHECK(c.parameter_count() == expected);

  // Default config: per block 4·32 + 2·32 + 64, plus the head's 32; twice.
  const TransformerConfig def;
  const WeightMap dbase = init_model(def, 0);
  const std::vector<WeightMap> dmodels = {dbase, dbase};
  CHECK(init_coefficients(dbase, dmodels, cfg).parameter_count() == 2 * (2 * (4 * 32 + 2 * 32 + 64) + 32));

  DamConfig all = cfg;
  all.merge_scope = MergeScope::kAll;
  CHECK(init_coefficients(f.base, f.models, all).layers.size() == f.base.tensors.size());

  DamConfig random = cfg;
  random.init = DamInit::kRandom;
  random.init_sigma = 0.1;
  random.seed = 4;
  const CoefficientSet r1 = init_coefficients(f.base, f.models, random);
  const CoefficientSet r2 = init_coefficients(f.base, f.models, random);
  CHECK(coefficients_to_weights(r1) == coefficients_to_weights(r2));
  random.seed = 5;
  CHECK_FALSE(coefficients_to_weights(init_coefficients(f.base, f.models, random)) == coefficients_to_weights(r1));

  DamConfig ones = cfg;
  ones.init = DamInit::kOnes;
  const CoefficientSet one = init_coefficients(f.base, f.models, ones);
  for (double v : one.layers.at("lm_head")[1].value.data()) CHECK(v == 1.0);

  const std::vector<WeightMap> bad = {f.models[0], init_model(TransformerConfig{}, 0)};
  CHECK_THROWS_AS(init_coefficients(f.base, bad, cfg), IncompatibleModelsError);
}

TEST_CASE("column scaling selects columns from each model", "[dam][merged_forward]") {
  WeightMap base;
  base.tensors.emplace("lm_head", Tensor({2, 2}, 0.0f));
  WeightMap w1 = base, w2 = base;
  w1.tensors.at("lm_head") = Tensor({2, 2}, {1, 2, 3, 4});
  w2.tensors.at("lm_head") = Tensor({2, 2}, {5, 6, 7, 8});
  const std::vector<WeightMap> models = {w1, w2};
  CoefficientSet c = selector_coefficients(base, 2, 0, MergeScope::kLinearOnly);
  c.layers.at("lm_head")[0].value = TensorD({2}, {1.0, 0.0});
  c.layers.at("lm_head")[1].value = TensorD({2}, {0.0, 1.0});
  CHECK(bake(base, models, c).at("lm_head") == Tensor({2, 2}, {1, 6, 3, 8}));

  // The on-the-fly layer agrees with the materialized one.
  MergeInputs<double> inputs = make_merge_inputs<double>(base, models);
  MergedSource<double> source(inputs, c);
  Tape<double> tape;
  auto x = tape.constant(TensorD({1, 2}, {0.5, -2.0}));
  const TensorD y = source.linear(tape, "lm_head", x).value();
  CHECK(y == TensorD({1, 2}, {1 * 0.5 + 6 * -2.0, 3 * 0.5 + 8 * -2.0}));
}

TEST_CASE("merged forward identities", "[dam][merged_forward]") {
  Fixture f;
  std::mt19937_64 rng(6);
  const TokenBatch batch = random_batch(f.config, 10, 0, rng);

  // One model with unit coefficients is that model.
  const std::vector<WeightMap> one = {f.models[0]};
  DamConfig ones;
  ones.init = DamInit::kOnes;
  CoefficientSet c1 = init_coefficients(f.base, one, ones);
  MergeInputs<double> in1 = make_merge_inputs<double>(f.base, one);
  Tape<double> tape;
  auto plain_params = frozen_params<double>(f.models[0]);
  const TensorD plain = forward<double>(tape, plain_params, f.config, batch).value();
  CHECK(merged_forward(tape, in1, c1, f.config, batch).value() == plain);

  // One-hot selector reproduces the selected model exactly.
  MergeInputs<double> in2 = make_merge_inputs<double>(f.base, f.models);
  for (std::size_t k = 0; k < 2; ++k) {
    CoefficientSet sel = selector_coefficients(f.base, 2, k, MergeScope::kLinearOnly);
    auto pk = frozen_params<double>(f.models[k]);
    const TensorD a = merged_forward(tape, in2, sel, f.config, batch).value();
    const TensorD b = forward<double>(tape, pk, f.config, batch).value();
    double worst = 0;
    for (std::size_t q = 0; q < a.size(); ++q) worst = std::max(worst, std::abs(a[q] - b[q]));
    CHECK(worst == 0.0);
    const WeightMap baked = bake(f.base, f.models, sel);
    CHECK(baked.tensors == f.models[k].tensors);
  }
}

TEST_CASE("uniform initialization reproduces the soup", "[dam][anchor]") {
  Fixture f;
  const CoefficientSet c = init_coefficients(f.base, f.models, DamConfig{});
  const float w[] = {0.5f, 0.5f};
  const WeightMap soup = linear_merge(f.base, f.models, w, MergeScope::kLinearOnly);
  CHECK(bake(f.base, f.models, c) == soup);

  // Three models: fl(1/3) coefficients bake to exactly the fl(1/3) soup.
  const std::vector<WeightMap> three = {f.models[0], f.models[1], perturbed(f.base, 9)};
  const float third = 1.0f / 3.0f;
  const float w3[] = {third, third, third};
  CHECK(bake(f.base, three, init_coefficients(f.base, three, DamConfig{})) ==
        linear_merge(f.base, three, w3, MergeScope::kLinearOnly));

  MergeInputs<double> inputs = make_merge_inputs<double>(f.base, f.models);
  CoefficientSet cc = c;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenBatch batch = random_batch(f.config, 12, 0, rng);
    Tape<double> tape;
    const TensorD merged = merged_forward(tape, inputs, cc, f.config, batch).value();
    const Tensor soup_logits = forward(soup, f.config, batch);
    double worst = 0.0;
    for (std::size_t k = 0; k < merged.size(); ++k) worst = std::max(worst, std::abs(merged[k] - soup_logits[k]));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("bake agrees with merged forward", "[dam][bake]") {
  Fixture f;
  DamConfig cfg;
  cfg.init = DamInit::kRandom;
  cfg.init_sigma = 0.3;
  cfg.merge_scope = MergeScope::kAll;
  CoefficientSet c = init_coefficients(f.base, f.models, cfg);
  // Round through f32 as bake does, so the two sides use equal coefficients.
  c = coefficients_from_weights(coefficients_to_weights(c));
  const WeightMap baked = bake(f.base, f.models, c);
  MergeInputs<double> inputs = make_merge_inputs<double>(f.base, f.models);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenBatch batch = random_batch(f.config, 12, 0, rng);
    Tape<double> tape;
    const TensorD merged = merged_forward(tape, inputs, c, f.config, batch).value();
    const Tensor logits = forward(baked, f.config, batch);
    double worst = 0.0;
    for (std::size_t k = 0; k < merged.size(); ++k) worst = std::max(worst, std::abs(merged[k] - logits[k]));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("kl loss examples", "[dam][loss]") {
  const TensorD m[] = {row({0, 0})};
  const TensorD e[] = {row({std::log(1.0), std::log(3.0)})};
  CHECK_THAT(kl_loss(m, e), WithinAbs(0.5 * std::log(4.0 / 3.0), 1e-12));
  CHECK_THAT(kl_loss(m, e), WithinAbs(0.1438, 1e-4));
  CHECK(kl_loss(m, m) == 0.0);
  // Swapped direction: 0.25 ln(0.25/0.5) + 0.75 ln(0.75/0.5).
  CHECK_THAT(kl_loss(m, e, KlDirection::kExpertFirst),
             WithinAbs(0.25 * std::log(0.5) + 0.75 * std::log(1.5), 1e-12));

  // Averaged over positions within a dataset, summed over datasets.
  const TensorD m2[] = {TensorD({2, 2}, {0, 0, 0, 0}), row({0, 0})};
  const TensorD e2[] = {TensorD({2, 2}, {0, std::log(3.0), 0, 0}), row({0, std::log(3.0)})};
  CHECK_THAT(kl_loss(m2, e2), WithinAbs(0.25 * std::log(4.0 / 3.0) + 0.5 * std::log(4.0 / 3.0), 1e-12));

  const TensorD bad[] = {row({0, 0, 0})};
  CHECK_THROWS_AS(kl_loss(m, bad), ShapeError);
}

TEST_CASE("kl loss is non-negative", "[dam][loss][property]") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const TensorD a[] = {testing::random_tensor<double>({3, 5}, rng, -4, 4)};
    const TensorD b[] = {testing::random_tensor<double>({3, 5}, rng, -4, 4)};
    CHECK(kl_loss(a, b) >= 0.0);
    CHECK(kl_loss(a, b, KlDirection::kExpertFirst) >= 0.0);
  }
}

TEST_CASE("mse loss examples", "[dam][loss]") {
  const TensorD m[] = {row({1, 1})};
  const TensorD e[] = {row({0, 0})};
  CHECK(mse_loss(m, e) == 1.0);
  CHECK(mse_loss(m, m) == 0.0);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const TensorD a[] = {testing::random_tensor<double>({2, 4}, rng)};
    const TensorD b[] = {testing::random_tensor<double>({2, 4}, rng)};
    CHECK(mse_loss(a, b) == mse_loss(b, a));
  }
  // Mean over datasets: (1 + 4) / 2.
  const TensorD m2[] = {row({1, 1}), row({2, 2})};
  const TensorD e2[] = {row({0, 0}), row({0, 0})};
  CHECK(mse_loss(m2, e2) == 2.5);
}

TEST_CASE("entropy loss examples", "[dam][loss]") {
  const TensorD uniform[] = {row({0, 0, 0, 0})};
  CHECK_THAT(entropy_loss(uniform), WithinAbs(std::log(4.0), 1e-12));
  const TensorD two[] = {row({0, 0, 0, 0}), row({0, 0, 0, 0})};
  CHECK_THAT(entropy_loss(two), WithinAbs(2.0 * std::log(4.0), 1e-12));
  const TensorD peaked[] = {row({50, 0, 0, 0})};
  CHECK(entropy_loss(peaked) < 1e-18);
  // V = 2: H(a) = −p ln p − (1−p) ln(1−p), p = σ(a), decreasing in a ≥ 0.
  double previous = std::log(2.0);
  for (double a : {0.5, 1.0, 2.0}) {
    const TensorD r[] = {row({a, 0})};
    const double p = 1.0 / (1.0 + std::exp(-a));
    const double expected = -p * std::log(p) - (1 - p) * std::log(1 - p);
    CHECK_THAT(entropy_loss(r), WithinAbs(expected, 1e-12));
    CHECK(entropy_loss(r) < previous);
    previous = entropy_loss(r);
  }
}

TEST_CASE("penalty examples", "[dam][penalty]") {
  auto set_of = [](std::vector<std::vector<double>> vectors) {
    CoefficientSet c;
    c.num_models = vectors.size();
    auto& layer = c.layers["lm_head"];
    for (auto& v : vectors) {
      Parameter<double> p;
      const std::size_t n = v.size();
      p.value = TensorD({n}, std::move(v));
      layer.push_back(std::move(p));
    }
    return c;
  };
  CHECK(cosine_penalty(set_of({{1, 0}, {0, 1}}), 1.0) == 0.0);
  CHECK_THAT(cosine_penalty(set_of({{1, 2}, {1, 2}}), 1.0), WithinAbs(1.0, 1e-12));
  CHECK_THAT(cosine_penalty(set_of({{1, 2}, {1, 2}, {1, 2}}), 1.0), WithinAbs(3.0, 1e-12));
  CHECK(cosine_penalty(set_of({{0, 0}, {1, 2}}), 1.0) == 0.0);
  CHECK(cosine_penalty(set_of({{1, 2}}), 1.0) == 0.0);
  CHECK_THAT(cosine_penalty(set_of({{1, 2}, {1, 2}}), 0.25), WithinAbs(0.25, 1e-12));

  CHECK(reg_penalty(set_of({{0, 0}}), 0.1, 0.01) == 0.0);
  CHECK_THAT(reg_penalty(set_of({{1, -1}}), 0.1, 0.01), WithinAbs(0.22, 1e-15));
  CHECK(reg_penalty(set_of({{3, -7}}), 0.0, 0.0) == 0.0);
}

TEST_CASE("objective decomposition and structure", "[dam][objective]") {
  Fixture f;
  std::mt19937_64 rng(12);
  const std::vector<TokenBatch> batches = {random_batch(f.config, 8, 0, rng), random_batch(f.config, 8, 1, rng)};
  MergeInputs<double> inputs = make_merge_inputs<double>(f.base, f.models);
  std::size_t calls = 0;
  ExpertLogitCache cache(f.models, f.config);
  const ExpertLogitsFn<double> expert = [&](const TokenBatch& b) {
    ++calls;
    return cache.logits(b);
  };
  for (const std::string& row : ablation_rows()) {
    const DamConfig cfg = apply_objective(DamConfig{}, row);
    CHECK(objective_name(cfg) == row);
    DamConfig rand = cfg;
    rand.init = DamInit::kRandom;
    rand.init_sigma = 0.2;
    CoefficientSet c = init_coefficients(f.base, f.models, rand);
    Tape<double> tape;
    calls = 0;
    const auto obj = dam_objective(tape, inputs, c, f.config, cfg, batches, expert);
    const auto& p = obj.parts;
    CHECK_THAT(p.task + p.cosine + p.l1 + p.l2, WithinAbs(p.total, 1e-12));
    CHECK((p.cosine != 0.0) == (row.find("cosine") != std::string::npos));
    CHECK((p.l1 != 0.0) == (row.find("reg") != std::string::npos));
    CHECK((calls == 0) == (cfg.loss == DamLoss::kEntropy));
  }
}

TEST_CASE("coefficient gradients match finite differences for every objective row",
          "[dam][gradient][property]") {
  const TransformerConfig config;
  const WeightMap base = init_model(config, 1);
  const std::vector<WeightMap> models = {perturbed(base, 2, 0.1), perturbed(base, 3, 0.1)};
  std::mt19937_64 rng(13);
  const std::vector<TokenBatch> batches = {random_batch(config, 6, 0, rng), random_batch(config, 6, 1, rng)};
  MergeInputs<double> inputs = make_merge_inputs<double>(base, models);
  ExpertLogitCache cache(models, config);
  const ExpertLogitsFn<double> expert = [&](const TokenBatch& b) { return cache.logits(b); };
  for (MergeScope scope : {MergeScope::kLinearOnly, MergeScope::kAll}) {
    for (const std::string& row : ablation_rows()) {
      DamConfig cfg = apply_objective(DamConfig{}, row);
      cfg.merge_scope = scope;
      // Larger penalties than the defaults so every term moves the gradient.
      if (cfg.lambda_cosine > 0) cfg.lambda_cosine = 0.1;
      if (cfg.lambda_l1 > 0) cfg.lambda_l1 = 0.01;
      if (cfg.lambda_l2 > 0) cfg.lambda_l2 = 0.01;
      DamConfig init = cfg;
      init.init = DamInit::kRandom;
      init.init_sigma = 0.1;
      CoefficientSet c = init_coefficients(base, models, init);
      const auto params = c.parameters();
      {
        Tape<double> tape;
        tape.backward(dam_objective(tape, inputs, c, config, cfg, batches, expert).total);
      }
      const auto analytic = testing::flatten_grads(params);
      const auto numeric = testing::central_difference(params, [&] {
        Tape<double> tape;
        return dam_objective(tape, inputs, c, config, cfg, batches, expert).parts.total;
      });
      INFO(row << " scope " << to_string(scope));
      CHECK(testing::max_relative_error(analytic, numeric) <= 1e-4);
    }
  }
}

TEST_CASE("dam_train", "[dam][train]") {
  Fixture f;
  std::mt19937_64 rng(14);
  std::vector<std::vector<TokenBatch>> datasets(2);
  for (std::size_t d = 0; d < 2; ++d) {
    for (int i = 0; i < 8; ++i) datasets[d].push_back(random_batch(f.config, 8, d, rng));
  }
  const std::vector<WeightMap> snapshot = f.models;

  DamConfig zero;
  zero.steps = 0;
  const DamResult z = dam_train(f.base, f.models, datasets, f.config, zero);
  CHECK(coefficients_to_weights(z.coefficients) ==
        coefficients_to_weights(init_coefficients(f.base, f.models, zero)));
  CHECK(z.report.steps.empty());

  DamConfig cfg = apply_objective(DamConfig{}, "kl+cosine+reg");
  cfg.steps = 200;
  const DamResult r = dam_train(f.base, f.models, datasets, f.config, cfg);
  REQUIRE(r.report.steps.size() == 200);
  CHECK(r.report.final_probe.total < r.report.initial_probe.total);
  CHECK(r.report.steps.back().objective.total < r.report.steps.front().objective.total);
  for (const StepRecord& s : r.report.steps) {
    const auto& o = s.objective;
    CHECK(std::abs(o.task + o.cosine + o.l1 + o.l2 - o.total) <= 1e-5);
    CHECK(s.dataset == s.step % 2);
  }
  CHECK(f.models == snapshot);

  const DamResult again = dam_train(f.base, f.models, datasets, f.config, cfg);
  CHECK(again.report.summary_json() == r.report.summary_json());
  CHECK(coefficients_to_weights(again.coefficients) == coefficients_to_weights(r.coefficients));

  DamConfig sgd = cfg;
  sgd.optimizer = DamOptimizer::kSgd;
  sgd.learning_rate = 0.05;
  sgd.grad_clip = 1.0;
  sgd.steps = 50;
  CHECK(dam_train(f.base, f.models, datasets, f.config, sgd).report.final_probe.total <
        r.report.initial_probe.total);

  CHECK_THROWS_AS(dam_train(f.base, f.models, std::vector<std::vector<TokenBatch>>{{}}, f.config, cfg), ConfigError);
}

TEST_CASE("dam recovers the expert that generated the data", "[dam][train]") {
  Fixture f;
  std::mt19937_64 rng(15);
  // Both streams are scored against expert 0.
  std::vector<std::vector<TokenBatch>> datasets(2);
  for (auto& ds : datasets) {
    for (int i = 0; i < 8; ++i) ds.push_back(random_batch(f.config, 8, 0, rng));
  }
  DamConfig cfg;
  cfg.steps = 300;
  const DamResult r = dam_train(f.base, f.models, datasets, f.config, cfg);
  CHECK(r.report.summary.mean[0] > r.report.summary.mean[1]);
  CHECK(r.report.final_probe.total < 0.5 * r.report.initial_probe.total);
}

TEST_CASE("dam config JSON and coefficient files", "[dam][io]") {
  const auto j = nlohmann::json::parse(R"({"objective": "kl+cosine", "steps": 7, "merge_scope": "all"})");
  const DamConfig c = j.get<DamConfig>();
  CHECK(c.loss == DamLoss::kKl);
  CHECK(c.lambda_cosine == kDefaultLambdaCosine);
  CHECK(c.lambda_l1 == 0.0);
  CHECK(c.steps == 7);
  CHECK(c.merge_scope == MergeScope::kAll);
  CHECK(c.learning_rate == 2e-3);
  CHECK(c.batch_size == 1);
  CHECK(nlohmann::json(c).get<DamConfig>() == c);
  CHECK(nlohmann::json::parse(R"({"objective": "kl+cosine", "lambda_cosine": 0.5})").get<DamConfig>().lambda_cosine ==
        0.5);
  CHECK(DamConfig{}.steps == 500);
  CHECK(DamConfig{}.adam_beta2 == 0.999);

  auto bad = [](const char* text) { return nlohmann::json::parse(text).get<DamConfig>(); };
  CHECK_THROWS_AS(bad(R"({"loss": "hinge"})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"lambda_l1": -1})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"objective": "kl+cosine+cosine"})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"objective": "kl", "loss": "kl"})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"learning_rate": 0})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"stepz": 3})"), ConfigError);

  Fixture f;
  DamConfig rnd;
  rnd.init = DamInit::kRandom;
  const CoefficientSet coeffs = init_coefficients(f.base, f.models, rnd);
  const auto dir = std::filesystem::temp_directory_path() / "mergeforge_test_dam";
  write_coefficients(coeffs, dir / "c.safetensors");
  const WeightMap raw = read_checkpoint(dir / "c.safetensors");
  CHECK(raw.contains("dam.layers.0.attn.q.model1"));
  CHECK(raw.contains("dam.lm_head.model0"));
  const CoefficientSet back = read_coefficients(dir / "c.safetensors");
  CHECK(coefficients_to_weights(back) == coefficients_to_weights(coeffs));
  CHECK(bake(f.base, f.models, back) == bake(f.base, f.models, coeffs));
  std::filesystem::remove_all(dir);
}

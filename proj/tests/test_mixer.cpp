#include <doctest.h>

#include <cmath>

#include "helpers.hpp"

using namespace recycle;
using testutil::random_tensor;

namespace {

SourceModelRecord random_source(const BackboneConfig& bc, int id, std::size_t classes, std::uint64_t seed) {
  SourceModelRecord rec;
  rec.id = id;
  rec.task_id = "src" + std::to_string(id);
  rec.eft = EftConfig{2, 1, 1};
  for (std::size_t c = 0; c < classes; ++c) rec.classes.push_back(static_cast<int>(c));
  rec.feature_dim = bc.feature_dim();
  ParamMap p = init_classifier(bc, rec.eft, classes, true, seed);
  std::mt19937_64 rng(seed);
  p["head.weight"] = random_tensor<float>({bc.feature_dim(), classes}, rng, 0.1);
  rec.set_params(p);
  return rec;
}

MixedBatch<double> to_double(const MixedBatch<float>& b) {
  MixedBatch<double> out{b.images.cast<double>(), b.labels, {}, {}};
  for (const auto& f : b.source_features) out.source_features.push_back(f.cast<double>());
  for (const auto& f : b.dc_features) out.dc_features.push_back(f.cast<double>());
  return out;
}

}  // namespace

TEST_CASE("mix_params vertices and midpoint") {
  std::mt19937_64 rng(1);
  const Tensor theta_new = random_tensor<float>({3, 3, 2, 4}, rng), theta_s = random_tensor<float>({3, 3, 2, 4}, rng);
  Graph<float> g;

  SUBCASE("no sources") {
    const Tensor lam = init_mixing(0.5, 0, 1).logits;
    Var<float> row = select_row(softmax(g.constant(lam)), 0);
    CHECK(mix_params<float>(row, g.constant(theta_new), {}).value().identical(theta_new));
  }
  SUBCASE("equal weights") {
    std::vector<Var<float>> src{g.constant(Tensor(Shape{2, 2}, 1.f))};
    const Tensor out =
        mix_params<float>(g.constant(Tensor(Shape{2}, 0.5f)), g.constant(Tensor(Shape{2, 2}, 0.f)), src).value();
    for (float v : out.data()) CHECK(v == 0.5f);
  }
  SUBCASE("one-hot on a source") {
    std::vector<Var<float>> src{g.constant(theta_s), g.constant(theta_new)};
    const Tensor out =
        mix_params<float>(g.constant(Tensor(Shape{3}, std::vector<float>{0, 1, 0})), g.constant(theta_new), src).value();
    CHECK(out.identical(theta_new));
    const Tensor first =
        mix_params<float>(g.constant(Tensor(Shape{3}, std::vector<float>{1, 0, 0})), g.constant(theta_new), src).value();
    CHECK(first.identical(theta_s));
  }
  SUBCASE("shape mismatch") {
    std::vector<Var<float>> src{g.constant(Tensor(Shape{3, 3, 2, 2}))};
    CHECK_THROWS_AS(mix_params<float>(g.constant(Tensor(Shape{2}, 0.5f)), g.constant(theta_new), src), DimensionError);
  }
}

TEST_CASE("mix_features vertices, fixed point and blend") {
  Graph<float> g;
  const Tensor ft(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensor fs(Shape{2, 3}, std::vector<float>{-1, 0, 1, 2, 2, 2});
  std::vector<Var<float>> src{g.constant(fs)};
  CHECK(mix_features<float>(g.constant(Tensor(Shape{2}, std::vector<float>{0, 1})), g.constant(ft), src)
            .value()
            .identical(ft));
  std::vector<Var<float>> same{g.constant(ft)};
  const Tensor fixed = mix_features<float>(g.constant(Tensor(Shape{2}, std::vector<float>{0.3f, 0.7f})), g.constant(ft), same).value();
  for (std::size_t i = 0; i < ft.size(); ++i) CHECK(fixed[i] == doctest::Approx(ft[i]).epsilon(1e-6));
  const Tensor blend =
      mix_features<float>(g.constant(Tensor(Shape{2}, std::vector<float>{0.25f, 0.75f})), g.constant(ft), src).value();
  for (std::size_t i = 0; i < ft.size(); ++i) CHECK(blend[i] == doctest::Approx(0.25 * fs[i] + 0.75 * ft[i]).epsilon(1e-6));
  std::vector<Var<float>> wide{g.constant(Tensor(Shape{2, 4}))};
  CHECK_THROWS_AS(mix_features<float>(g.constant(Tensor(Shape{2}, 0.5f)), g.constant(ft), wide), DimensionError);
}

TEST_CASE("init_mixing realizes the requested weights") {
  const auto five = init_mixing(1.0 / 6.0, 5, 3).realized();
  REQUIRE(five.size() == 4);
  for (const auto& row : five)
    for (double v : row) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-7));
  const auto one = init_mixing(0.5, 1, 2).realized();
  for (const auto& row : one) {
    CHECK(row[0] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(row[1] == doctest::Approx(0.5).epsilon(1e-7));
  }
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const double lam = 0.01 + 0.98 * uniform01(rng);
    const std::size_t m = 1 + rng() % 4;
    for (const auto& row : init_mixing(lam, m, 2).realized()) {
      CHECK(std::abs(row[m] - lam) < 1e-7);
      for (std::size_t n = 0; n < m; ++n) CHECK(std::abs(row[n] - (1 - lam) / m) < 1e-7);
    }
  }
  CHECK(init_mixing(0.3, 0, 4).realized()[0][0] == 1.0);
  CHECK_THROWS_AS(init_mixing(0.0, 2, 1), ValidationError);
  CHECK_THROWS_AS(init_mixing(1.0, 2, 1), ValidationError);
  const auto ends = fixed_mixing(0.0, 2, 1).realized();
  CHECK(ends[0][2] == 0.0);
  CHECK(ends[0][0] == 0.5);
}

TEST_CASE("simplex check") {
  CHECK_NOTHROW(check_simplex({{0.2, 0.8}}));
  CHECK_THROWS(check_simplex({{0.2, 0.7}}));
  CHECK_THROWS(check_simplex({{0.0, 1.0}}));
  CHECK_NOTHROW(check_simplex({{0.0, 1.0}}, 1e-6, true));
}

TEST_CASE("mixed loss gradients on a micro model") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(10, 6, 3);
  std::vector<SourceModelRecord> sources{random_source(bc, 0, 2, 7)};
  FeatureCache cache(bb, task);
  TrainConfig cfg;
  cfg.random_new_init = true;
  cfg.seed = 4;
  for (MixMode mode : {MixMode::ParamsAndFeatures, MixMode::FeaturesOnly}) {
    MixedModel model = build_mixed_model(bb, task, sources, cache, EftConfig{2, 1, 1}, cfg, mode);
    std::mt19937_64 rng(5);
    model.trainable["mix.logits"] = random_tensor<float>({3, 2}, rng, 0.5);
    model.trainable["head.weight"] = random_tensor<float>({4, 2}, rng, 0.5);
    const std::vector<std::size_t> rows{task.train[0], task.train[1], task.train[2], task.train[3]};
    const MixedBatch<double> batch = to_double(mixed_batch(model, task, rows));
    const BasicBackbone<double> bbd = bb.cast<double>();
    std::vector<std::vector<BasicEftLayer<double>>> modules;
    for (const auto& s : model.source_modules) {
      modules.emplace_back();
      for (const auto& l : s) modules.back().push_back(l.cast<double>());
    }
    std::map<std::string, TensorD> params;
    for (const auto& [name, t] : model.trainable) params.emplace(name, t.cast<double>());
    auto loss_of = [&](const std::map<std::string, TensorD>& p, std::map<std::string, TensorD>* grads) {
      Graph<double> g;
      auto vars = bind_params<double>(g, p);
      auto loss = mixed_loss<double>(g, bbd, model.eft, mode, vars, modules, batch, 0.05);
      CHECK(loss.dc.has_value());
      if (grads) *grads = g.backward(loss.total);
      return loss.total.value().item();
    };
    std::map<std::string, TensorD> analytic;
    loss_of(params, &analytic);
    for (const auto& [name, value] : params) {
      const TensorD numeric = finite_diff_grad<double>(
          [&, n = name](const TensorD& v) {
            auto p = params;
            p[n] = v;
            return loss_of(p, nullptr);
          },
          value, 1e-6);
      CAPTURE(name);
      CHECK(testutil::max_rel_err(analytic.at(name), numeric) < 1e-4);
    }
  }
}

TEST_CASE("training with sigma zero logs pure cross-entropy and keeps weights frozen") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(20, 6, 4);
  std::vector<SourceModelRecord> sources{random_source(bc, 0, 2, 1), random_source(bc, 1, 2, 2)};
  const std::uint64_t bb_hash = backbone_hash(bb);
  std::vector<std::uint64_t> src_hash;
  for (const auto& s : sources)
    for (const auto& [n, t] : s.params()) src_hash.push_back(tensor_hash(t));
  FeatureCache cache(bb, task);
  TrainConfig cfg;
  cfg.sigma = 0;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  MixedModel model = build_mixed_model(bb, task, sources, cache, EftConfig{2, 1, 1}, cfg);
  int steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s) {
    CHECK(s.total == s.ce);
    CHECK(s.dc == 0.0);
    ++steps;
  };
  const MixedRun run = train_mixed(model, bb, task, cfg, hooks);
  CHECK(steps == 5 * 3);  // 24 train rows, batch 8
  for (const auto& e : run.history) CHECK(e.total == e.ce);
  CHECK(backbone_hash(bb) == bb_hash);
  std::size_t i = 0;
  for (const auto& s : sources)
    for (const auto& [n, t] : s.params()) CHECK(tensor_hash(t) == src_hash[i++]);
  CHECK(run.history.back().lambda.size() == bc.layers() + 1);
}

TEST_CASE("one small step decreases the total loss") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(10, 6, 6);
  std::vector<SourceModelRecord> sources{random_source(bc, 0, 2, 3)};
  FeatureCache cache(bb, task);
  TrainConfig cfg;
  cfg.random_new_init = true;
  MixedModel model = build_mixed_model(bb, task, sources, cache, EftConfig{2, 1, 1}, cfg);
  const MixedBatch<float> batch = mixed_batch(model, task, task.train);
  auto eval = [&](const ParamMap& p, ParamMap* grads) {
    Graph<float> g;
    auto vars = bind_params<float>(g, p);
    auto loss = mixed_loss<float>(g, bb, model.eft, model.mode, vars, model.source_modules, batch, 0.05);
    if (grads) *grads = g.backward(loss.total);
    return static_cast<double>(loss.total.value().item());
  };
  ParamMap grads;
  const double before = eval(model.trainable, &grads);
  double sq = 0;
  ParamMap stepped = model.trainable;
  const double lr = 1e-3;
  for (auto& [name, t] : stepped)
    for (std::size_t i = 0; i < t.size(); ++i) {
      sq += static_cast<double>(grads.at(name)[i]) * grads.at(name)[i];
      t[i] -= static_cast<float>(lr * grads.at(name)[i]);
    }
  const double after = eval(stepped, nullptr);
  CHECK(after < before);
  // First-order prediction of the decrease.
  CHECK((before - after) == doctest::Approx(lr * sq).epsilon(0.2));
}

TEST_CASE("independent training equals mixing without sources") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(20, 6, 8);
  FeatureCache cache(bb, task);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  cfg.seed = 12;
  cfg.lambda_new = 1.0;
  const ClassifierRun ind = train_independent(task, bb, EftConfig{2, 1, 1}, cfg);
  const MixedRun mix = train_mixed(build_mixed_model(bb, task, {}, cache, EftConfig{2, 1, 1}, cfg), bb, task, cfg);
  REQUIRE(ind.history.size() == mix.history.size());
  for (std::size_t e = 0; e < ind.history.size(); ++e) CHECK(ind.history[e].total == mix.history[e].total);
  for (const auto& [name, t] : ind.params) CHECK(mix.model.trainable.at(name).identical(t));
  CHECK(ind.test_accuracy == mix.test_accuracy);
}

TEST_CASE("finetuning leaves the backbone and the source record untouched") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(20, 6, 9);
  const SourceModelRecord src = random_source(bc, 0, 3, 4);
  const auto before = src.params();
  const std::uint64_t h = backbone_hash(bb);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  const ClassifierRun run = finetune_source(src, task, bb, cfg);
  CHECK(backbone_hash(bb) == h);
  for (const auto& [n, t] : src.params()) CHECK(before.at(n).identical(t));
  CHECK(run.params.at("head.weight").shape() == Shape{bc.feature_dim(), 2});
  CHECK_FALSE(run.params.at("eft.0.groupwise").identical(before.at("eft.0.groupwise")));
}

TEST_CASE("frozen mixing weights stay fixed, including at the simplex corners") {
  const BackboneConfig bc = testutil::micro_backbone();
  const Backbone bb = make_backbone(bc);
  const TaskSpec task = testutil::halves_task(10, 6, 10);
  std::vector<SourceModelRecord> sources{random_source(bc, 0, 2, 5)};
  FeatureCache cache(bb, task);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  for (double lam : {0.0, 0.3, 1.0}) {
    MixedModel model = build_mixed_model(bb, task, sources, cache, EftConfig{2, 1, 1}, cfg, MixMode::FeaturesOnly);
    model.trainable["mix.logits"] = fixed_mixing(lam, 1, model.layers).logits;
    model.freeze_lambda = true;
    const Tensor logits = model.trainable.at("mix.logits");
    const MixedRun run = train_mixed(model, bb, task, cfg);
    CHECK(run.model.trainable.at("mix.logits").identical(logits));
    CHECK(run.history.back().lambda.back()[1] == doctest::Approx(lam));
  }
}

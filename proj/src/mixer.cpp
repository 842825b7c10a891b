#include "recycle/mixer.hpp"

#include <cmath>

namespace recycle {

namespace {

constexpr std::size_t kEvalBatch = 256;

std::vector<std::vector<double>> softmax_rows(const Tensor& logits) {
  std::vector<std::vector<double>> rows(logits.dim(0), std::vector<double>(logits.dim(1)));
  const std::size_t c = logits.dim(1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const float* p = logits.ptr() + r * c;
    const double mx = *std::max_element(p, p + c);
    double z = 0;
    for (std::size_t i = 0; i < c; ++i) z += rows[r][i] = std::exp(static_cast<double>(p[i]) - mx);
    for (auto& v : rows[r]) v /= z;
  }
  return rows;
}

template <class T>
void check_same_shapes(Var<T> ref, std::span<const Var<T>> others, const char* op) {
  for (const auto& o : others)
    if (o.shape() != ref.shape()) throw DimensionError(op, "shape " + shape_str(o.shape()), ref.value().size(), o.value().size());
}

}  // namespace

std::vector<std::vector<double>> MixingSpec::realized() const { return softmax_rows(logits); }

MixingSpec init_mixing(double lambda_new, std::size_t m, std::size_t layers) {
  const bool ok = m == 0 ? lambda_new > 0 && lambda_new <= 1 : lambda_new > 0 && lambda_new < 1;
  if (!ok) throw ValidationError("init_mixing: lambda_new must lie in (0,1), got " + std::to_string(lambda_new));
  Tensor logits(Shape{layers + 1, m + 1});
  if (m > 0) {
    const double ls = (1.0 - lambda_new) / static_cast<double>(m);
    for (std::size_t r = 0; r <= layers; ++r) {
      for (std::size_t n = 0; n < m; ++n) logits[r * (m + 1) + n] = static_cast<float>(std::log(ls));
      logits[r * (m + 1) + m] = static_cast<float>(std::log(lambda_new));
    }
  }
  return {std::move(logits)};
}

MixingSpec fixed_mixing(double lambda_new, std::size_t m, std::size_t layers) {
  require(m >= 1, "fixed_mixing: needs at least one source");
  if (!(lambda_new >= 0 && lambda_new <= 1))
    throw ValidationError("fixed_mixing: lambda_new must lie in [0,1], got " + std::to_string(lambda_new));
  const double ls = (1.0 - lambda_new) / static_cast<double>(m);
  Tensor logits(Shape{layers + 1, m + 1});
  for (std::size_t r = 0; r <= layers; ++r) {
    for (std::size_t n = 0; n < m; ++n) logits[r * (m + 1) + n] = static_cast<float>(std::log(ls));
    logits[r * (m + 1) + m] = static_cast<float>(std::log(lambda_new));
  }
  return {std::move(logits)};
}

void check_simplex(const std::vector<std::vector<double>>& rows, double tol, bool allow_zero) {
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double s = 0;
    for (double v : rows[r]) {
      if (!(v > 0) && !(allow_zero && v == 0)) throw std::runtime_error("simplex violated: non-positive weight in row " + std::to_string(r));
      s += v;
    }
    if (std::abs(s - 1.0) > tol) throw std::runtime_error("simplex violated: row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

template <class T>
Var<T> mix_params(Var<T> lambda_row, Var<T> theta_new, std::span<const Var<T>> sources) {
  check_same_shapes(theta_new, sources, "mix_params");
  std::vector<Var<T>> inputs(sources.begin(), sources.end());
  inputs.push_back(theta_new);
  return mix(lambda_row, std::span<const Var<T>>(inputs));
}

template <class T>
Var<T> mix_features(Var<T> lambda_row, Var<T> target, std::span<const Var<T>> sources) {
  for (const auto& s : sources) {
    if (s.shape().size() != 2 || target.shape().size() != 2) throw DimensionError("mix_features", "rank", 2, s.shape().size());
    if (s.shape()[1] != target.shape()[1]) throw DimensionError("mix_features", "d", target.shape()[1], s.shape()[1]);
    if (s.shape()[0] != target.shape()[0]) throw DimensionError("mix_features", "rows", target.shape()[0], s.shape()[0]);
  }
  std::vector<Var<T>> inputs(sources.begin(), sources.end());
  inputs.push_back(target);
  return mix(lambda_row, std::span<const Var<T>>(inputs));
}

std::string to_string(MixMode mode) { return mode == MixMode::ParamsAndFeatures ? "params+features" : "features"; }

std::size_t MixedModel::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable)
    if (!(freeze_lambda && name == "mix.logits")) n += t.size();
  return n;
}

MixedModel build_mixed_model(const Backbone& backbone, const TaskSpec& task, std::span<const SourceModelRecord> sources,
                             FeatureCache& cache, const EftConfig& eft, const TrainConfig& cfg, MixMode mode) {
  for (std::size_t k : backbone.config.channels) eft.validate_channels(k);
  MixedModel model;
  model.eft = eft;
  model.mode = mode;
  model.layers = backbone.config.layers();
  model.classes = task.num_classes();
  model.trainable = init_classifier(backbone.config, eft, task.num_classes(), cfg.random_new_init, cfg.seed);
  model.trainable.emplace("mix.logits", init_mixing(cfg.lambda_new, sources.size(), model.layers).logits);
  for (const auto& src : sources) {
    src.validate(backbone.config);
    if (src.eft.a != eft.a || src.eft.b != eft.b)
      throw DimensionError("build_mixed_model", "source " + std::to_string(src.id) + " group size", eft.a, src.eft.a);
    model.source_ids.push_back(src.id);
    model.source_modules.push_back(src.adapters);
    model.source_features.push_back(cache.all_rows(src));
    model.dc_features.push_back(model.source_features.back());
  }
  return model;
}

template <class T>
MixedForward<T> mixed_forward(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft, MixMode mode,
                              const std::map<std::string, Var<T>>& vars,
                              std::span<const std::vector<BasicEftLayer<T>>> source_modules,
                              const MixedBatch<T>& batch) {
  const std::size_t layers = backbone.config.layers();
  const std::size_t m = batch.source_features.size();
  Var<T> lambda = softmax(lookup(vars, std::string("mix.logits")));
  if (lambda.shape() != Shape{layers + 1, m + 1})
    throw DimensionError("mixed_forward", "mix.logits", (layers + 1) * (m + 1), lambda.value().size());
  if (mode == MixMode::ParamsAndFeatures && source_modules.size() != m)
    throw DimensionError("mixed_forward", "source modules", m, source_modules.size());

  std::vector<Var<T>> gw, pw;
  for (std::size_t j = 0; j < layers; ++j) {
    Var<T> new_gw = lookup(vars, eft_name("eft", j, "groupwise"));
    Var<T> new_pw = lookup(vars, eft_name("eft", j, "pointwise"));
    if (mode == MixMode::FeaturesOnly) {
      gw.push_back(new_gw);
      pw.push_back(new_pw);
      continue;
    }
    std::vector<Var<T>> src_gw, src_pw;
    for (const auto& src : source_modules) {
      src_gw.push_back(g.constant(src.at(j).groupwise));
      src_pw.push_back(g.constant(src.at(j).pointwise));
    }
    Var<T> row = select_row(lambda, j);
    gw.push_back(mix_params(row, new_gw, std::span<const Var<T>>(src_gw)));
    pw.push_back(mix_params(row, new_pw, std::span<const Var<T>>(src_pw)));
  }
  Var<T> f_t = forward_features<T>(g, backbone, g.constant(batch.images), gw, pw, eft);
  std::vector<Var<T>> src_f;
  for (const auto& f : batch.source_features) src_f.push_back(g.constant(f));
  Var<T> combined = mix_features(select_row(lambda, layers), f_t, std::span<const Var<T>>(src_f));
  Var<T> logits = linear_head(combined, lookup(vars, std::string("head.weight")), lookup(vars, std::string("head.bias")));
  return {logits, f_t, lambda};
}

template <class T>
LossTerms<T> mixed_loss(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft, MixMode mode,
                        const std::map<std::string, Var<T>>& vars,
                        std::span<const std::vector<BasicEftLayer<T>>> source_modules, const MixedBatch<T>& batch,
                        double sigma) {
  require(sigma >= 0, "mixed_loss: sigma must be non-negative");
  MixedForward<T> fwd = mixed_forward(g, backbone, eft, mode, vars, source_modules, batch);
  LossTerms<T> loss;
  loss.ce = softmax_cross_entropy(fwd.logits, std::span<const int>(batch.labels));
  loss.total = loss.ce;
  if (sigma == 0 || batch.dc_features.empty()) return loss;
  if (batch.labels.size() < 2) {
    // Distances need two rows; a one-row tail batch carries no DC signal.
    loss.degenerate = static_cast<int>(batch.dc_features.size());
    return loss;
  }
  std::vector<Var<T>> src;
  for (const auto& f : batch.dc_features) src.push_back(g.constant(f));
  DcLoss<T> dc = dc_loss_sum(std::span<const Var<T>>(src), fwd.target_features, static_cast<T>(sigma));
  loss.dc = dc.value;
  loss.degenerate = dc.degenerate;
  loss.total = add(loss.ce, dc.value);
  return loss;
}

MixedBatch<float> mixed_batch(const MixedModel& model, const TaskSpec& task, std::span<const std::size_t> task_rows) {
  MixedBatch<float> b;
  b.images = gather_rows(task.images, task_rows);
  for (std::size_t r : task_rows) b.labels.push_back(task.labels.at(r));
  for (const auto& f : model.source_features) {
    if (f.dim(0) != task.num_samples()) throw DimensionError("mixed_batch", "source rows", task.num_samples(), f.dim(0));
    b.source_features.push_back(gather_rows(f, task_rows));
  }
  for (const auto& f : model.dc_features) b.dc_features.push_back(gather_rows(f, task_rows));
  return b;
}

Tensor mixed_predict(const MixedModel& model, const Backbone& backbone, const TaskSpec& task,
                     const std::vector<std::size_t>& rows) {
  std::vector<float> out;
  for (std::size_t begin = 0; begin < rows.size(); begin += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, rows.size() - begin);
    const MixedBatch<float> batch = mixed_batch(model, task, std::span<const std::size_t>(rows.data() + begin, count));
    Graph<float> g;
    auto vars = bind_params<float>(g, {}, model.trainable);
    auto fwd = mixed_forward<float>(g, backbone, model.eft, model.mode, vars, model.source_modules, batch);
    out.insert(out.end(), fwd.logits.value().data().begin(), fwd.logits.value().data().end());
  }
  return Tensor(Shape{rows.size(), model.classes}, std::move(out));
}

MixedRun train_mixed(MixedModel model, const Backbone& backbone, const TaskSpec& task, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  task.validate();
  require(!task.train.empty(), "train_mixed: empty train split");
  require(model.classes == task.num_classes(), "train_mixed: model and task disagree on the class count");
  ParamMap trainable = model.trainable;
  ParamMap frozen;
  if (model.freeze_lambda) {
    frozen.emplace("mix.logits", trainable.at("mix.logits"));
    trainable.erase("mix.logits");
  }
  auto logits_of = [&](const ParamMap& params) -> const Tensor& {
    auto it = params.find("mix.logits");
    return it != params.end() ? it->second : frozen.at("mix.logits");
  };

  TrainHooks wrapped;
  wrapped.on_step = [&](const StepInfo& info) {
    check_simplex(softmax_rows(logits_of(info.params)), 1e-6, model.freeze_lambda);
    if (hooks.on_step) hooks.on_step(info);
  };
  wrapped.lambda_of = [&](const ParamMap& params) { return softmax_rows(logits_of(params)); };

  Objective objective = [&](Graph<float>& g, const std::map<std::string, Var<float>>& vars,
                            std::span<const std::size_t> rows) {
    std::vector<std::size_t> task_rows;
    for (std::size_t r : rows) task_rows.push_back(task.train[r]);
    const MixedBatch<float> batch = mixed_batch(model, task, task_rows);
    return mixed_loss<float>(g, backbone, model.eft, model.mode, vars, model.source_modules, batch, cfg.sigma);
  };

  MixedRun run;
  run.history = train_loop(trainable, frozen, task.train.size(), objective, cfg, wrapped);
  for (auto& [name, t] : trainable) model.trainable[name] = std::move(t);
  run.model = std::move(model);
  if (!task.val.empty()) {
    const Tensor logits = mixed_predict(run.model, backbone, task, task.val);
    const SplitData val = split_data(task, task.val);
    run.val_accuracy = accuracy(logits, val.labels);
    run.val_ce = softmax_cross_entropy(logits, std::span<const int>(val.labels));
  }
  if (!task.test.empty()) {
    const Tensor logits = mixed_predict(run.model, backbone, task, task.test);
    const SplitData test = split_data(task, task.test);
    run.test_accuracy = accuracy(logits, test.labels);
    run.test_ce = softmax_cross_entropy(logits, std::span<const int>(test.labels));
  }
  return run;
}

ClassifierRun train_independent(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft,
                                const TrainConfig& cfg) {
  return train_classifier(task, backbone, eft,
                          init_classifier(backbone.config, eft, task.num_classes(), cfg.random_new_init, cfg.seed), cfg);
}

ClassifierRun finetune_source(const SourceModelRecord& source, const TaskSpec& task, const Backbone& backbone,
                              const TrainConfig& cfg) {
  source.validate(backbone.config);
  ParamMap init = source.params();
  init["head.weight"] = Tensor(Shape{source.feature_dim, task.num_classes()});
  init["head.bias"] = Tensor(Shape{task.num_classes()});
  return train_classifier(task, backbone, source.eft, std::move(init), cfg);
}

void to_json(nlohmann::json& j, const MixedRun& run) {
  j = nlohmann::json::object();
  j["mode"] = to_string(run.model.mode);
  j["source_ids"] = run.model.source_ids;
  j["freeze_lambda"] = run.model.freeze_lambda;
  j["history"] = run.history;
  j["lambda_final"] = run.model.mixing().realized();
  j["val_accuracy"] = run.val_accuracy;
  j["test_accuracy"] = run.test_accuracy;
  j["val_ce"] = run.val_ce;
  j["test_ce"] = run.test_ce;
}

#define RECYCLE_MIXER_INSTANTIATE(T)                                                                             \
  template Var<T> mix_params<T>(Var<T>, Var<T>, std::span<const Var<T>>);                                       \
  template Var<T> mix_features<T>(Var<T>, Var<T>, std::span<const Var<T>>);                                     \
  template MixedForward<T> mixed_forward<T>(Graph<T>&, const BasicBackbone<T>&, const EftConfig&, MixMode,     \
                                            const std::map<std::string, Var<T>>&,                               \
                                            std::span<const std::vector<BasicEftLayer<T>>>, const MixedBatch<T>&); \
  template LossTerms<T> mixed_loss<T>(Graph<T>&, const BasicBackbone<T>&, const EftConfig&, MixMode,           \
                                      const std::map<std::string, Var<T>>&,                                     \
                                      std::span<const std::vector<BasicEftLayer<T>>>, const MixedBatch<T>&, double);

RECYCLE_MIXER_INSTANTIATE(float)
RECYCLE_MIXER_INSTANTIATE(double)

}  // namespace recycle

#include "recycle/source_factory.hpp"

#include <cmath>

namespace recycle {

namespace {

constexpr std::size_t kEvalBatch = 256;

}  // namespace

ParamMap SourceModelRecord::params() const {
  ParamMap p;
  for (std::size_t j = 0; j < adapters.size(); ++j) {
    p.emplace(eft_name("eft", j, "groupwise"), adapters[j].groupwise);
    p.emplace(eft_name("eft", j, "pointwise"), adapters[j].pointwise);
  }
  p.emplace("head.weight", head_weight);
  p.emplace("head.bias", head_bias);
  return p;
}

void SourceModelRecord::set_params(const ParamMap& params) {
  std::size_t layers = 0;
  while (params.count(eft_name("eft", layers, "groupwise"))) ++layers;
  adapters = adapters_from_params(params, layers);
  head_weight = params.at("head.weight");
  head_bias = params.at("head.bias");
}

void SourceModelRecord::validate(const BackboneConfig& backbone) const {
  if (adapters.size() != backbone.layers()) throw DimensionError("source model", "layers", backbone.layers(), adapters.size());
  for (std::size_t j = 0; j < adapters.size(); ++j) {
    if (adapters[j].groupwise.shape() != Shape{3, 3, eft.a, backbone.channels[j]})
      throw DimensionError("source model", eft_name("eft", j, "groupwise"), 9 * eft.a * backbone.channels[j],
                           adapters[j].groupwise.size());
    if (adapters[j].pointwise.shape() != Shape{1, 1, eft.b, backbone.channels[j]})
      throw DimensionError("source model", eft_name("eft", j, "pointwise"), eft.b * backbone.channels[j],
                           adapters[j].pointwise.size());
  }
  if (feature_dim != backbone.feature_dim()) throw DimensionError("source model", "d", backbone.feature_dim(), feature_dim);
  if (head_weight.shape() != Shape{feature_dim, num_classes()})
    throw DimensionError("source model", "head.weight", feature_dim * num_classes(), head_weight.size());
  if (head_bias.shape() != Shape{num_classes()}) throw DimensionError("source model", "head.bias", num_classes(), head_bias.size());
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto& o = logits;
  if (o.rank() != 2) throw DimensionError("softmax_cross_entropy", "rank", 2, o.rank());
  const std::size_t n = o.dim(0), c = o.dim(1);
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy", "labels", n, labels.size());
  require(n > 0, "softmax_cross_entropy: empty batch");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    const float* row = o.ptr() + i * c;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    double tail = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (j != arg) tail += std::exp(static_cast<double>(row[j]) - row[arg]);
    total += static_cast<double>(row[arg]) + std::log1p(tail) - static_cast<double>(row[y]);
  }
  return total / static_cast<double>(n);
}

ParamMap init_classifier(const BackboneConfig& backbone, const EftConfig& eft, std::size_t classes, bool random_init,
                         std::uint64_t seed) {
  require(classes >= 1, "init_classifier: need at least one class");
  std::mt19937_64 rng(derive_seed(seed, 0x1e17ULL));
  const auto adapters = init_adapters(backbone, eft, random_init, rng);
  ParamMap p;
  for (std::size_t j = 0; j < adapters.size(); ++j) {
    p.emplace(eft_name("eft", j, "groupwise"), adapters[j].groupwise);
    p.emplace(eft_name("eft", j, "pointwise"), adapters[j].pointwise);
  }
  p.emplace("head.weight", Tensor(Shape{backbone.feature_dim(), classes}));
  p.emplace("head.bias", Tensor(Shape{classes}));
  return p;
}

std::vector<EftLayer> adapters_from_params(const ParamMap& params, std::size_t layers, const std::string& prefix) {
  std::vector<EftLayer> out;
  for (std::size_t j = 0; j < layers; ++j) {
    auto gw = params.find(eft_name(prefix, j, "groupwise"));
    auto pw = params.find(eft_name(prefix, j, "pointwise"));
    require(gw != params.end() && pw != params.end(), "missing adapter weights for layer " + std::to_string(j));
    out.push_back({gw->second, pw->second});
  }
  return out;
}

Tensor classifier_predict(const Backbone& backbone, const EftConfig& eft, const ParamMap& params, const Tensor& images) {
  const std::size_t n = images.dim(0);
  std::vector<float> out;
  std::size_t classes = 0;
  for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, n - begin);
    Graph<float> g;
    auto vars = bind_params<float>(g, {}, params);
    auto logits = classifier_logits<float>(g, backbone, eft, vars, slice_rows(images, begin, count));
    classes = logits.shape()[1];
    out.insert(out.end(), logits.value().data().begin(), logits.value().data().end());
  }
  if (n == 0) classes = params.at("head.bias").size();
  return Tensor(Shape{n, classes}, std::move(out));
}

Tensor extract_features(const Backbone& backbone, const EftConfig& eft, std::span<const EftLayer> adapters,
                        const Tensor& images) {
  require(images.rank() == 4 && images.dim(0) > 0, "extract_features: no input rows");
  const std::size_t n = images.dim(0);
  std::vector<float> out;
  for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
    const std::size_t count = std::min(kEvalBatch, n - begin);
    Graph<float> g;
    std::vector<Var<float>> gw, pw;
    for (const auto& a : adapters) {
      gw.push_back(g.constant(a.groupwise));
      pw.push_back(g.constant(a.pointwise));
    }
    auto f = forward_features<float>(g, backbone, g.constant(slice_rows(images, begin, count)), gw, pw, eft);
    out.insert(out.end(), f.value().data().begin(), f.value().data().end());
  }
  return Tensor(Shape{n, backbone.config.feature_dim()}, std::move(out));
}

FeatureDataset extract_features(const SourceModelRecord& model, const Backbone& backbone, const Tensor& images,
                                std::vector<int> labels) {
  model.validate(backbone.config);
  if (images.rank() == 4 && images.dim(0) != labels.size())
    throw DimensionError("extract_features", "rows", images.dim(0), labels.size());
  FeatureDataset ds;
  ds.features = extract_features(backbone, model.eft, model.adapters, images);
  if (ds.dim() != model.feature_dim) throw DimensionError("extract_features", "d", model.feature_dim, ds.dim());
  ds.labels = std::move(labels);
  ds.model_id = model.id;
  return ds;
}

ClassifierRun train_classifier(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft, ParamMap init,
                               const TrainConfig& cfg, const TrainHooks& hooks) {
  task.validate();
  require(!task.train.empty(), "train_classifier: empty train split");
  const SplitData train = split_data(task, task.train);
  Objective objective = [&](Graph<float>& g, const std::map<std::string, Var<float>>& vars,
                            std::span<const std::size_t> rows) {
    const Tensor images = gather_rows(train.images, rows);
    std::vector<int> labels;
    for (std::size_t r : rows) labels.push_back(train.labels[r]);
    auto logits = classifier_logits<float>(g, backbone, eft, vars, images);
    auto ce = softmax_cross_entropy(logits, std::span<const int>(labels));
    return LossTerms<float>{ce, ce, std::nullopt, 0};
  };
  ClassifierRun run;
  run.params = std::move(init);
  run.history = train_loop(run.params, {}, train.labels.size(), objective, cfg, hooks);
  if (!task.val.empty()) {
    const SplitData val = split_data(task, task.val);
    run.val_accuracy = accuracy(classifier_predict(backbone, eft, run.params, val.images), val.labels);
  }
  if (!task.test.empty()) {
    const SplitData test = split_data(task, task.test);
    run.test_accuracy = accuracy(classifier_predict(backbone, eft, run.params, test.images), test.labels);
  }
  return run;
}

SourceModelRecord train_source(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft,
                               const TrainConfig& cfg) {
  require(!task.train.empty(), "train_source: empty train split");
  for (std::size_t k : backbone.config.channels) eft.validate_channels(k);
  const TaskSpec prepared = ensure_validation(task, cfg.seed);
  ClassifierRun run = train_classifier(
      prepared, backbone, eft, init_classifier(backbone.config, eft, task.num_classes(), cfg.random_new_init, cfg.seed), cfg);
  SourceModelRecord rec;
  rec.task_id = task.id;
  rec.family = task.family;
  rec.classes = task.classes;
  rec.eft = eft;
  rec.feature_dim = backbone.config.feature_dim();
  rec.set_params(run.params);
  rec.val_accuracy = run.val_accuracy;
  return rec;
}

}  // namespace recycle

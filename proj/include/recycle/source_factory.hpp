#pragma once

#include <span>
#include <string>
#include <vector>

#include "recycle/config.hpp"
#include "recycle/network.hpp"
#include "recycle/tasks.hpp"
#include "recycle/trainer.hpp"

namespace recycle {

/// A trained source model: per-layer adapters and a linear head on top of the
/// shared frozen backbone.
struct SourceModelRecord {
  int id = -1;
  std::string task_id;
  std::string family;
  std::vector<int> classes;
  EftConfig eft;
  std::vector<EftLayer> adapters;
  Tensor head_weight;  // [d, alpha]
  Tensor head_bias;    // [alpha]
  std::size_t feature_dim = 0;
  double val_accuracy = 0;

  std::size_t num_classes() const { return classes.size(); }
  /// "eft.<j>.groupwise", "eft.<j>.pointwise", "head.weight", "head.bias".
  ParamMap params() const;
  void set_params(const ParamMap& params);
  /// Classifier input width equals feature_dim, adapters match the backbone.
  void validate(const BackboneConfig& backbone) const;
};

/// Rows of extracted features paired with labels.
struct FeatureDataset {
  Tensor features;  // [n, d]
  std::vector<int> labels;
  int model_id = -1;

  std::size_t rows() const { return features.rank() == 2 ? features.dim(0) : 0; }
  std::size_t dim() const { return features.rank() == 2 ? features.dim(1) : 0; }
};

/// Mean over the batch of -log softmax(logits)[label], evaluated in double.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Fresh classifier parameters: adapters per `random_init`, zero head.
ParamMap init_classifier(const BackboneConfig& backbone, const EftConfig& eft, std::size_t classes, bool random_init,
                         std::uint64_t seed);

struct ClassifierRun {
  ParamMap params;
  std::vector<EpochRecord> history;
  double val_accuracy = 0;
  double test_accuracy = 0;
};

/// Trains adapters and head with cross-entropy on the task's train split.
/// The backbone only ever enters the graph as constants.
ClassifierRun train_classifier(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft, ParamMap init,
                               const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Source training. Holds out 10% of train as validation when the task has none.
SourceModelRecord train_source(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft,
                               const TrainConfig& cfg);

/// Batched feature extraction through backbone + adapters (pre-head output).
Tensor extract_features(const Backbone& backbone, const EftConfig& eft, std::span<const EftLayer> adapters,
                        const Tensor& images);
FeatureDataset extract_features(const SourceModelRecord& model, const Backbone& backbone, const Tensor& images,
                                std::vector<int> labels);

/// Batched logits for a classifier parameter map.
Tensor classifier_predict(const Backbone& backbone, const EftConfig& eft, const ParamMap& params, const Tensor& images);

/// Adapters stored in a classifier parameter map.
std::vector<EftLayer> adapters_from_params(const ParamMap& params, std::size_t layers, const std::string& prefix = "eft");

}  // namespace recycle

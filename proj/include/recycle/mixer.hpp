#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/dcor.hpp"
#include "recycle/selector.hpp"
#include "recycle/source_factory.hpp"

namespace recycle {

/// Mixing logits, (J+1) x (m+1). Row j < J mixes layer j's adapter weights,
/// row J mixes final features. Columns are the m sources in selection order,
/// then the new module last.
struct MixingSpec {
  Tensor logits;

  std::size_t rows() const { return logits.dim(0); }
  std::size_t columns() const { return logits.dim(1); }
  /// Row-wise normalized exponential, in double.
  std::vector<std::vector<double>> realized() const;
};

/// Every row realizes (ls, ..., ls, lambda_new) with ls = (1 - lambda_new) / m.
/// With m = 0 the single column is 1 whatever lambda_new is.
MixingSpec init_mixing(double lambda_new, std::size_t m, std::size_t layers);

/// Frozen weights for sweeps: lambda_new may be 0 or 1 (zero weights become
/// -inf logits). Only meaningful with freeze_lambda.
MixingSpec fixed_mixing(double lambda_new, std::size_t m, std::size_t layers);

/// Throws unless every row sums to 1 within tol and every entry is positive
/// (non-negative when allow_zero is set).
void check_simplex(const std::vector<std::vector<double>>& rows, double tol = 1e-6, bool allow_zero = false);

/// lambda[m] * new + sum_n lambda[n] * sources[n]. Shapes must agree.
template <class T>
Var<T> mix_params(Var<T> lambda_row, Var<T> theta_new, std::span<const Var<T>> sources);

/// Same convex combination over [batch, d] feature matrices.
template <class T>
Var<T> mix_features(Var<T> lambda_row, Var<T> target, std::span<const Var<T>> sources);

enum class MixMode { ParamsAndFeatures, FeaturesOnly };

std::string to_string(MixMode mode);

/// Target model built around selected sources. The trainable set is
/// "eft.<j>.groupwise", "eft.<j>.pointwise", "head.weight", "head.bias" and
/// "mix.logits" (the last moves to the frozen side when freeze_lambda is set).
struct MixedModel {
  EftConfig eft;
  MixMode mode = MixMode::ParamsAndFeatures;
  std::size_t layers = 0;
  std::size_t classes = 0;
  std::vector<int> source_ids;
  std::vector<std::vector<EftLayer>> source_modules;  // white-box only
  std::vector<Tensor> source_features;                // per source, one row per task row, width d_t
  std::vector<Tensor> dc_features;                    // per source, inputs to the DC term
  ParamMap trainable;
  bool freeze_lambda = false;

  std::size_t m() const { return source_features.size(); }
  MixingSpec mixing() const { return {trainable.at("mix.logits")}; }
  std::size_t trainable_count() const;
};

/// White-box model: sources' adapters are mixed per layer and their features
/// (precomputed for every task row) are mixed before the head.
MixedModel build_mixed_model(const Backbone& backbone, const TaskSpec& task, std::span<const SourceModelRecord> sources,
                             FeatureCache& cache, const EftConfig& eft, const TrainConfig& cfg,
                             MixMode mode = MixMode::ParamsAndFeatures);

/// Per-batch inputs that do not depend on parameters.
template <class T>
struct MixedBatch {
  BasicTensor<T> images;
  std::vector<int> labels;
  std::vector<BasicTensor<T>> source_features;  // [batch, d_t] per source
  std::vector<BasicTensor<T>> dc_features;      // [batch, d_s] per source
};

template <class T>
struct MixedForward {
  Var<T> logits;
  Var<T> target_features;
  Var<T> lambda;  // realized [J+1, m+1]
};

template <class T>
MixedForward<T> mixed_forward(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft, MixMode mode,
                              const std::map<std::string, Var<T>>& vars,
                              std::span<const std::vector<BasicEftLayer<T>>> source_modules,
                              const MixedBatch<T>& batch);

/// Cross-entropy plus sigma times the summed DC terms between every source's
/// features and the target features.
template <class T>
LossTerms<T> mixed_loss(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft, MixMode mode,
                        const std::map<std::string, Var<T>>& vars,
                        std::span<const std::vector<BasicEftLayer<T>>> source_modules, const MixedBatch<T>& batch,
                        double sigma);

MixedBatch<float> mixed_batch(const MixedModel& model, const TaskSpec& task, std::span<const std::size_t> task_rows);

struct MixedRun {
  MixedModel model;
  std::vector<EpochRecord> history;
  double val_accuracy = 0, test_accuracy = 0;
  double val_ce = 0, test_ce = 0;
};

/// Minibatch training of the trainable set under CE + sigma * DC. The
/// realized lambda rows are checked against the simplex after every step.
MixedRun train_mixed(MixedModel model, const Backbone& backbone, const TaskSpec& task, const TrainConfig& cfg,
                     const TrainHooks& hooks = {});

/// Batched logits for arbitrary task rows.
Tensor mixed_predict(const MixedModel& model, const Backbone& backbone, const TaskSpec& task,
                     const std::vector<std::size_t>& rows);

/// Fresh adapters and head trained on target data alone.
ClassifierRun train_independent(const TaskSpec& task, const Backbone& backbone, const EftConfig& eft,
                                const TrainConfig& cfg);

/// Starts from the source's adapters with a zero head sized for the target.
ClassifierRun finetune_source(const SourceModelRecord& source, const TaskSpec& task, const Backbone& backbone,
                              const TrainConfig& cfg);

void to_json(nlohmann::json& j, const MixedRun& run);

}  // namespace recycle

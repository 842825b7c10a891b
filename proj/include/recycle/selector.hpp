#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/source_factory.hpp"

namespace recycle {

double euclidean_dist(std::span<const float> u, std::span<const float> v);

/// Indices of the k nearest training rows, ordered by (distance, row index).
std::vector<std::size_t> knn_neighbors(const FeatureDataset& train, std::span<const float> query, std::size_t k);

/// Majority label among the k nearest rows; ties go to the smallest label.
int knn_predict(const FeatureDataset& train, std::span<const float> query, std::size_t k);

/// Fraction of `val` rows whose k-NN prediction over `train` matches the label.
double knn_accuracy(const FeatureDataset& train, const FeatureDataset& val, std::size_t k);

struct SelectionConfig {
  std::size_t k = 5;
  std::size_t m = 1;
  std::string distance = "euclidean";

  void validate(std::size_t pool_size) const;
};

struct ModelScore {
  int model_id;
  double knn_acc;
};

/// Models whose accuracies tie exactly; resolved by ascending id.
struct TieRecord {
  double knn_acc;
  std::vector<int> model_ids;
};

struct SelectionReport {
  std::vector<ModelScore> scores;  // pool order
  std::vector<int> ranking;        // best first
  std::vector<TieRecord> ties;
  std::vector<int> selected;       // first m of ranking
  SelectionConfig config;
};

void to_json(nlohmann::json& j, const SelectionReport& r);

/// Per-model feature matrices for one task's rows, computed once on demand.
class FeatureCache {
 public:
  FeatureCache(const Backbone& backbone, const TaskSpec& task) : backbone_(backbone), task_(task) {}

  /// Features of every row of the task, [N, d_{s_n}].
  const Tensor& all_rows(const SourceModelRecord& model);
  FeatureDataset split(const SourceModelRecord& model, const std::vector<std::size_t>& rows);

 private:
  const Backbone& backbone_;
  const TaskSpec& task_;
  std::map<int, Tensor> features_;
};

/// k-NN validation accuracy of one model: the target train split is the
/// neighbor database, the validation split supplies the queries.
double knn_accuracy(const SourceModelRecord& model, FeatureCache& cache, const TaskSpec& target, std::size_t k);

/// Scores every pool model and returns the top m. Ties on accuracy go to the
/// smaller model id. No gradients are involved.
SelectionReport select_top_m(std::span<const SourceModelRecord> pool, const Backbone& backbone, const TaskSpec& target,
                             const SelectionConfig& cfg, FeatureCache* cache = nullptr);

}  // namespace recycle

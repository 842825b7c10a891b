#include "recycle/selector.hpp"

#include <algorithm>
#include <cmath>

namespace recycle {

double euclidean_dist(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw DimensionError("euclidean_dist", "d", u.size(), v.size());
  double s = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = static_cast<double>(u[i]) - static_cast<double>(v[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<std::size_t> knn_neighbors(const FeatureDataset& train, std::span<const float> query, std::size_t k) {
  const std::size_t n = train.rows(), d = train.dim();
  require(k >= 1, "knn: k must be at least 1");
  if (k > n) throw ValidationError("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " training rows");
  if (query.size() != d) throw DimensionError("knn", "d", d, query.size());
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i)
    dist[i] = {euclidean_dist(std::span<const float>(train.features.ptr() + i * d, d), query), i};
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = dist[i].second;
  return out;
}

int knn_predict(const FeatureDataset& train, std::span<const float> query, std::size_t k) {
  if (train.labels.size() != train.rows()) throw DimensionError("knn_predict", "labels", train.rows(), train.labels.size());
  std::map<int, std::size_t> votes;
  for (std::size_t i : knn_neighbors(train, query, k)) ++votes[train.labels[i]];
  int best = 0;
  std::size_t best_votes = 0;
  for (const auto& [label, count] : votes)  // ascending label, strict > keeps the smallest
    if (count > best_votes) {
      best = label;
      best_votes = count;
    }
  return best;
}

double knn_accuracy(const FeatureDataset& train, const FeatureDataset& val, std::size_t k) {
  require(train.rows() > 0 && val.rows() > 0, "knn_accuracy: empty split");
  if (train.dim() != val.dim()) throw DimensionError("knn_accuracy", "d", train.dim(), val.dim());
  std::size_t hits = 0;
  const std::size_t d = val.dim();
  for (std::size_t i = 0; i < val.rows(); ++i) {
    const int pred = knn_predict(train, std::span<const float>(val.features.ptr() + i * d, d), k);
    hits += pred == val.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(val.rows());
}

void SelectionConfig::validate(std::size_t pool_size) const {
  require(k >= 1, "selection: k must be at least 1");
  require(m >= 1, "selection: m must be at least 1");
  require(distance == "euclidean", "selection: unsupported distance '" + distance + "'");
  if (m > pool_size)
    throw ValidationError("selection: m=" + std::to_string(m) + " exceeds pool size " + std::to_string(pool_size));
}

void to_json(nlohmann::json& j, const SelectionReport& r) {
  j = nlohmann::json::object();
  j["k"] = r.config.k;
  j["m"] = r.config.m;
  j["distance"] = r.config.distance;
  auto& scores = j["scores"] = nlohmann::json::array();
  for (const auto& s : r.scores) scores.push_back({{"model_id", s.model_id}, {"knn_acc", s.knn_acc}});
  j["ranking"] = r.ranking;
  auto& ties = j["ties"] = nlohmann::json::array();
  for (const auto& t : r.ties) ties.push_back({{"knn_acc", t.knn_acc}, {"model_ids", t.model_ids}, {"rule", "smaller id first"}});
  j["selected"] = r.selected;
}

const Tensor& FeatureCache::all_rows(const SourceModelRecord& model) {
  auto it = features_.find(model.id);
  if (it == features_.end()) {
    model.validate(backbone_.config);
    it = features_.emplace(model.id, extract_features(backbone_, model.eft, model.adapters, task_.images)).first;
  }
  return it->second;
}

FeatureDataset FeatureCache::split(const SourceModelRecord& model, const std::vector<std::size_t>& rows) {
  FeatureDataset ds;
  ds.features = gather_rows(all_rows(model), rows);
  for (std::size_t r : rows) ds.labels.push_back(task_.labels[r]);
  ds.model_id = model.id;
  return ds;
}

double knn_accuracy(const SourceModelRecord& model, FeatureCache& cache, const TaskSpec& target, std::size_t k) {
  require(!target.train.empty() && !target.val.empty(), "knn_accuracy: target needs train and validation rows");
  return knn_accuracy(cache.split(model, target.train), cache.split(model, target.val), k);
}

SelectionReport select_top_m(std::span<const SourceModelRecord> pool, const Backbone& backbone, const TaskSpec& target,
                             const SelectionConfig& cfg, FeatureCache* cache) {
  require(!pool.empty(), "selection: empty pool");
  cfg.validate(pool.size());
  FeatureCache local(backbone, target);
  FeatureCache& fc = cache ? *cache : local;
  SelectionReport report;
  report.config = cfg;
  for (const auto& model : pool) report.scores.push_back({model.id, knn_accuracy(model, fc, target, cfg.k)});

  std::vector<ModelScore> sorted = report.scores;
  std::sort(sorted.begin(), sorted.end(), [](const ModelScore& x, const ModelScore& y) {
    return x.knn_acc != y.knn_acc ? x.knn_acc > y.knn_acc : x.model_id < y.model_id;
  });
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i + 1;
    while (j < sorted.size() && sorted[j].knn_acc == sorted[i].knn_acc) ++j;
    if (j - i > 1) {
      TieRecord tie{sorted[i].knn_acc, {}};
      for (std::size_t t = i; t < j; ++t) tie.model_ids.push_back(sorted[t].model_id);
      report.ties.push_back(std::move(tie));
    }
    i = j;
  }
  for (const auto& s : sorted) report.ranking.push_back(s.model_id);
  report.selected.assign(report.ranking.begin(), report.ranking.begin() + static_cast<std::ptrdiff_t>(cfg.m));
  return report;
}

}  // namespace recycle

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/autodiff.hpp"
#include "recycle/config.hpp"
#include "recycle/optim.hpp"

namespace recycle {

template <class T>
struct LossTerms {
  Var<T> total;
  Var<T> ce;
  std::optional<Var<T>> dc;  // σ-weighted DC sum, absent when no sources
  int degenerate = 0;        // DC terms that hit a zero-variance batch
};

/// Builds the loss for one minibatch. `rows` index the run's training set.
using Objective = std::function<LossTerms<float>(Graph<float>&, const std::map<std::string, Var<float>>&,
                                                 std::span<const std::size_t> rows)>;

struct EpochRecord {
  int epoch = 0;
  double total = 0, ce = 0, dc = 0;  // batch-size weighted means
  int degenerate_batches = 0;
  std::vector<std::vector<double>> lambda;  // realized mixing rows after the epoch
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct StepInfo {
  int epoch;
  long step;
  const ParamMap& params;
  double total, ce, dc;
};

struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  /// Realized simplex rows from the current parameters, logged per epoch.
  std::function<std::vector<std::vector<double>>(const ParamMap&)> lambda_of;
};

/// Minibatch Adam over `trainable`; `frozen` tensors enter each graph as
/// constants. Batches are drawn from a per-epoch seeded permutation of
/// [0, n_rows). Throws DivergenceError on a non-finite loss.
std::vector<EpochRecord> train_loop(ParamMap& trainable, const ParamMap& frozen, std::size_t n_rows,
                                    const Objective& objective, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

}  // namespace recycle

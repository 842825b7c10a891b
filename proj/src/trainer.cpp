#include "recycle/trainer.hpp"

#include <cmath>

#include "recycle/network.hpp"
#include "recycle/tasks.hpp"

namespace recycle {

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"loss_total", r.total},
       {"loss_ce", r.ce},
       {"loss_dc", r.dc},
       {"degenerate_batches", r.degenerate_batches},
       {"lambda", r.lambda}};
}

std::vector<EpochRecord> train_loop(ParamMap& trainable, const ParamMap& frozen, std::size_t n_rows,
                                    const Objective& objective, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  require(n_rows > 0, "train_loop: empty training set");
  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xba7c4ULL));
  std::vector<std::size_t> order(n_rows);
  std::vector<EpochRecord> history;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_rows; ++i) order[i] = i;
    seeded_shuffle(order, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t begin = 0; begin < n_rows; begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n_rows - begin);
      std::span<const std::size_t> rows(order.data() + begin, count);
      Graph<float> g;
      auto vars = bind_params(g, trainable, frozen);
      LossTerms<float> loss = objective(g, vars, rows);
      const double total = loss.total.value().item();
      const double ce = loss.ce.value().item();
      const double dc = loss.dc ? loss.dc->value().item() : 0.0;
      if (!std::isfinite(total)) throw DivergenceError("training loss became non-finite", epoch);
      const ParamMap grads = g.backward(loss.total);
      adam.step(trainable, grads);
      ++step;
      const double w = static_cast<double>(count) / static_cast<double>(n_rows);
      rec.total += w * total;
      rec.ce += w * ce;
      rec.dc += w * dc;
      rec.degenerate_batches += loss.degenerate > 0 ? 1 : 0;
      if (hooks.on_step) hooks.on_step(StepInfo{epoch, step, trainable, total, ce, dc});
    }
    if (hooks.lambda_of) rec.lambda = hooks.lambda_of(trainable);
    history.push_back(std::move(rec));
  }
  return history;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("accuracy", "rank", 2, logits.rank());
  if (logits.dim(0) != labels.size()) throw DimensionError("accuracy", "rows", logits.dim(0), labels.size());
  if (labels.empty()) return 0.0;
  const std::size_t c = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.ptr() + i * c;
    const auto arg = static_cast<int>(std::max_element(row, row + c) - row);
    hits += arg == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace recycle

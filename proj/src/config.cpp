#include "recycle/config.hpp"

#include "recycle/errors.hpp"

namespace recycle {

void TrainConfig::validate(bool grid_requested) const {
  require(lr >= 0 && weight_decay >= 0 && sigma >= 0, "TrainConfig: rates must be non-negative");
  require(epochs >= 0, "TrainConfig: epochs must be non-negative");
  require(batch_size >= 1, "TrainConfig: batch size must be positive");
  for (double v : grid_lr) require(v >= 0, "TrainConfig: grid learning rates must be non-negative");
  for (double v : grid_weight_decay) require(v >= 0, "TrainConfig: grid weight decays must be non-negative");
  for (double v : grid_lambda_new) require(v > 0 && v < 1, "TrainConfig: grid lambda_new must lie in (0,1)");
  if (grid_requested)
    require(!grid_lr.empty() && !grid_weight_decay.empty() && !grid_lambda_new.empty(),
            "TrainConfig: grid search needs a non-empty lattice");
}

TrainConfig TrainConfig::with_default_lattice(TrainConfig base) {
  base.grid_lr = {1e-2, 1e-3};
  base.grid_weight_decay = {0.0, 1e-5, 1e-4};
  base.grid_lambda_new = {0.001, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.997};
  return base;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"sigma", c.sigma},
       {"seed", c.seed},
       {"lambda_new", c.lambda_new},
       {"random_new_init", c.random_new_init},
       {"grid_lr", c.grid_lr},
       {"grid_weight_decay", c.grid_weight_decay},
       {"grid_lambda_new", c.grid_lambda_new}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.sigma = j.value("sigma", d.sigma);
  c.seed = j.value("seed", d.seed);
  c.lambda_new = j.value("lambda_new", d.lambda_new);
  c.random_new_init = j.value("random_new_init", d.random_new_init);
  c.grid_lr = j.value("grid_lr", d.grid_lr);
  c.grid_weight_decay = j.value("grid_weight_decay", d.grid_weight_decay);
  c.grid_lambda_new = j.value("grid_lambda_new", d.grid_lambda_new);
}

}  // namespace recycle

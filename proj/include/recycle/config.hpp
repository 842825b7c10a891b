#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

namespace recycle {

/// Optimizer and run settings shared by every training entry point.
/// Defaults follow the source-training recipe: Adam, lr 1e-3, weight decay
/// 1e-5, batch 128, DC trade-off 0.05.
struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int epochs = 30;
  std::size_t batch_size = 128;
  double sigma = 0.05;
  std::uint64_t seed = 0;
  double lambda_new = 0.5;
  bool random_new_init = false;  // small-Gaussian new modules instead of identity/zero

  // Grid-search lattice; cells are visited lr-major, then weight decay, then lambda_new.
  std::vector<double> grid_lr;
  std::vector<double> grid_weight_decay;
  std::vector<double> grid_lambda_new;

  void validate(bool grid_requested = false) const;

  /// lr {1e-2, 1e-3} x wd {0, 1e-5, 1e-4} x lambda_new {0.001, 0.1, ..., 0.9, 0.997}.
  static TrainConfig with_default_lattice(TrainConfig base);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace recycle

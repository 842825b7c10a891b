#pragma once

#include <map>
#include <string>
#include <vector>

#include "recycle/tensor.hpp"

namespace recycle {

using ParamMap = std::map<std::string, Tensor>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;  // decoupled: p <- p - lr * wd * p
};

/// Adam with decoupled weight decay. Only parameters present in the gradient
/// map are touched, so anything left out of the map stays bit-identical.
class Adam {
 public:
  explicit Adam(AdamConfig cfg);

  void step(ParamMap& params, const ParamMap& grads);
  long steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace recycle

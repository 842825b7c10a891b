#include "recycle/optim.hpp"

#include <cmath>

namespace recycle {

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  require(cfg.lr >= 0 && cfg.weight_decay >= 0, "Adam: rates must be non-negative");
  require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1, "Adam: betas must lie in [0,1)");
}

void Adam::step(ParamMap& params, const ParamMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("Adam: gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != grad.shape()) throw DimensionError("Adam", name, p.size(), grad.size());
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      const double decayed = p[i] - cfg_.lr * cfg_.weight_decay * p[i];
      p[i] = static_cast<float>(decayed - cfg_.lr * update);
    }
  }
}

}  // namespace recycle

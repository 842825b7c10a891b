#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/eft.hpp"
#include "recycle/optim.hpp"

namespace recycle {

/// Frozen convolutional trunk: 3x3 convs (pad 1, no bias), each followed by
/// its EFT adapter and a ReLU, optional 2x2 mean-pooling, then a global
/// mean-pool that yields the feature vector.
struct BackboneConfig {
  std::size_t image_size = 16;
  std::size_t in_channels = 1;
  std::vector<std::size_t> channels{8, 16, 16, 32};
  std::vector<bool> pool_after{false, true, true, false};
  std::uint64_t seed = 20240611;

  void validate() const;
  std::size_t layers() const { return channels.size(); }
  std::size_t feature_dim() const { return channels.back(); }

  /// Four layers (8,16,16,32), pooling twice, d = 32.
  static BackboneConfig desk();
  /// Narrow variant (4,8,8,16), d = 16; used as the black-box target model.
  static BackboneConfig narrow();
  /// Wide variant (8,16,32,64), d = 64.
  static BackboneConfig wide();
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

template <class T>
struct BasicBackbone {
  BackboneConfig config;
  std::vector<BasicTensor<T>> filters;  // per layer [3,3,C_in,C_out]

  template <class U>
  BasicBackbone<U> cast() const {
    BasicBackbone<U> out{config, {}};
    for (const auto& f : filters) out.filters.push_back(f.template cast<U>());
    return out;
  }
};

using Backbone = BasicBackbone<float>;

/// Deterministic, seed-driven weights: Gaussian columns orthonormalized per
/// layer (fan-in x fan-out) and scaled by sqrt(2).
Backbone make_backbone(const BackboneConfig& config);
std::uint64_t backbone_hash(const Backbone& backbone);
ParamMap backbone_params(const Backbone& backbone);
Backbone backbone_from_params(const BackboneConfig& config, const ParamMap& params);

/// Name of the EFT filter bank of layer j under a prefix, e.g. "eft.0.groupwise".
std::string eft_name(const std::string& prefix, std::size_t layer, const char* bank);

/// Fresh adapters for every backbone layer.
std::vector<EftLayer> init_adapters(const BackboneConfig& backbone, const EftConfig& eft, bool random_init,
                                    std::mt19937_64& rng);

/// Forward pass through the trunk with one adapter per layer. Backbone filters
/// enter the graph as constants, so they never receive a gradient.
template <class T>
Var<T> forward_features(Graph<T>& g, const BasicBackbone<T>& backbone, Var<T> images,
                        std::span<const Var<T>> groupwise, std::span<const Var<T>> pointwise, const EftConfig& eft);

/// logits = features · W + b
template <class T>
Var<T> linear_head(Var<T> features, Var<T> weight, Var<T> bias);

using VarMap = std::map<std::string, Var<float>>;

/// Registers `trainable` as named parameters and `frozen` as constants.
template <class T>
std::map<std::string, Var<T>> bind_params(Graph<T>& g, const std::map<std::string, BasicTensor<T>>& trainable,
                                          const std::map<std::string, BasicTensor<T>>& frozen = {});

template <class T>
const Var<T>& lookup(const std::map<std::string, Var<T>>& vars, const std::string& name);

/// Feature extractor plus linear head, the shape of every source model and
/// of the independent / finetune baselines. Parameter names:
/// "eft.<j>.groupwise", "eft.<j>.pointwise", "head.weight", "head.bias".
template <class T>
Var<T> classifier_logits(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft,
                         const std::map<std::string, Var<T>>& vars, const BasicTensor<T>& images,
                         Var<T>* features_out = nullptr);

}  // namespace recycle

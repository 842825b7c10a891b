#pragma once

#include <random>
#include <span>
#include <vector>

#include "recycle/autodiff.hpp"

namespace recycle {

/// Group sizes of the two EFT filter banks. gamma switches the point-wise bank.
struct EftConfig {
  std::size_t a = 2;  // channels per group-wise (3x3) group
  std::size_t b = 1;  // channels per point-wise (1x1) group
  int gamma = 1;

  void validate() const;
  /// Throws when K is not divisible by both group sizes.
  void validate_channels(std::size_t channels) const;

  static EftConfig desk() { return {2, 1, 1}; }
  static EftConfig large() { return {8, 16, 1}; }
};

/// One adapted layer: group-wise [3,3,a,K] and point-wise [1,1,b,K] filters.
template <class T>
struct BasicEftLayer {
  BasicTensor<T> groupwise;
  BasicTensor<T> pointwise;

  std::size_t channels() const { return groupwise.dim(3); }
  std::size_t param_count() const { return groupwise.size() + pointwise.size(); }

  template <class U>
  BasicEftLayer<U> cast() const {
    return {groupwise.template cast<U>(), pointwise.template cast<U>()};
  }
};

using EftLayer = BasicEftLayer<float>;

/// Group-wise bank at identity (center tap 1 on the matching channel), point-wise at zero.
EftLayer eft_identity_init(std::size_t channels, const EftConfig& cfg);
/// Small-Gaussian init for both banks.
EftLayer eft_random_init(std::size_t channels, const EftConfig& cfg, std::mt19937_64& rng, double stddev = 0.05);

/// H^s: split F into K/a groups, 3x3 convolve each with its own a filters, concatenate.
template <class T>
Var<T> apply_groupwise(Var<T> features, Var<T> groupwise, std::size_t a);

/// H = H^s + gamma * H^d, same shape as F.
template <class T>
Var<T> eft_forward(Var<T> features, Var<T> groupwise, Var<T> pointwise, const EftConfig& cfg);

/// Value-only convenience over plain tensors.
template <class T>
BasicTensor<T> eft_forward(const BasicTensor<T>& features, const BasicEftLayer<T>& layer, const EftConfig& cfg);

/// Σ over adapted layers of 9·a·K + b·K (filter weights only).
std::size_t param_count(std::span<const std::size_t> channel_schedule, const EftConfig& cfg);

/// Extra per-layer parameters a full adapter carries besides its filters.
struct AdapterOverheads {
  bool conv_bias = false;                  // one bias per output channel on each EFT conv
  std::size_t norm_layers_per_conv = 0;    // task-specific affine normalization (scale + shift)
};

/// Filters plus the overheads above, per adapted layer.
std::size_t adapter_param_count(std::span<const std::size_t> channel_schedule, const EftConfig& cfg,
                                const AdapterOverheads& overheads);

/// Output channels of every convolution in ResNet-18 in forward order: the stem,
/// 16 residual-block convs and (optionally) the three 1x1 downsample shortcuts.
std::vector<std::size_t> resnet18_channel_schedule(bool include_downsample = true);

}  // namespace recycle

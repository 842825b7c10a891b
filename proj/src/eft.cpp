#include "recycle/eft.hpp"

#include "recycle/tasks.hpp"

namespace recycle {

void EftConfig::validate() const {
  require(a >= 1 && b >= 1, "EftConfig: group sizes a and b must be >= 1");
  require(gamma == 0 || gamma == 1, "EftConfig: gamma must be 0 or 1");
}

void EftConfig::validate_channels(std::size_t channels) const {
  validate();
  if (channels % a != 0) throw DimensionError("eft", "K mod a", 0, channels % a);
  if (channels % b != 0) throw DimensionError("eft", "K mod b", 0, channels % b);
}

EftLayer eft_identity_init(std::size_t channels, const EftConfig& cfg) {
  cfg.validate_channels(channels);
  EftLayer layer{Tensor(Shape{3, 3, cfg.a, channels}), Tensor(Shape{1, 1, cfg.b, channels})};
  // Center tap (1,1): output channel co reads within-group channel co % a.
  for (std::size_t co = 0; co < channels; ++co) layer.groupwise[((1 * 3 + 1) * cfg.a + co % cfg.a) * channels + co] = 1.f;
  return layer;
}

EftLayer eft_random_init(std::size_t channels, const EftConfig& cfg, std::mt19937_64& rng, double stddev) {
  cfg.validate_channels(channels);
  EftLayer layer{Tensor(Shape{3, 3, cfg.a, channels}), Tensor(Shape{1, 1, cfg.b, channels})};
  for (auto& v : layer.groupwise.data()) v = static_cast<float>(stddev * gaussian(rng));
  for (auto& v : layer.pointwise.data()) v = static_cast<float>(stddev * gaussian(rng));
  return layer;
}

template <class T>
Var<T> apply_groupwise(Var<T> features, Var<T> groupwise, std::size_t a) {
  if (features.shape().size() != 4) throw DimensionError("apply_groupwise", "rank", 4, features.shape().size());
  const std::size_t k = features.shape()[3];
  if (a == 0 || k % a != 0) throw DimensionError("apply_groupwise", "K mod a", 0, a == 0 ? k : k % a);
  const Shape& w = groupwise.shape();
  if (w.size() != 4 || w[0] != 3 || w[1] != 3) throw DimensionError("apply_groupwise", "kernel", 3, w.empty() ? 0 : w[0]);
  if (w[2] != a) throw DimensionError("apply_groupwise", "filter depth", a, w[2]);
  if (w[3] != k) throw DimensionError("apply_groupwise", "K", k, w[3]);
  return conv2d(features, groupwise, k / a, 1);
}

template <class T>
Var<T> eft_forward(Var<T> features, Var<T> groupwise, Var<T> pointwise, const EftConfig& cfg) {
  cfg.validate();
  Var<T> hs = apply_groupwise(features, groupwise, cfg.a);
  if (cfg.gamma == 0) return hs;
  const std::size_t k = features.shape()[3];
  if (k % cfg.b != 0) throw DimensionError("eft_forward", "K mod b", 0, k % cfg.b);
  const Shape& w = pointwise.shape();
  if (w.size() != 4 || w[0] != 1 || w[1] != 1) throw DimensionError("eft_forward", "pointwise kernel", 1, w.empty() ? 0 : w[0]);
  if (w[2] != cfg.b) throw DimensionError("eft_forward", "pointwise depth", cfg.b, w[2]);
  if (w[3] != k) throw DimensionError("eft_forward", "K", k, w[3]);
  Var<T> hd = conv2d(features, pointwise, k / cfg.b, 0);
  return add(hs, hd);
}

template <class T>
BasicTensor<T> eft_forward(const BasicTensor<T>& features, const BasicEftLayer<T>& layer, const EftConfig& cfg) {
  Graph<T> g;
  auto out = eft_forward(g.constant(features), g.constant(layer.groupwise), g.constant(layer.pointwise), cfg);
  return out.value();
}

std::size_t param_count(std::span<const std::size_t> channel_schedule, const EftConfig& cfg) {
  return adapter_param_count(channel_schedule, cfg, AdapterOverheads{});
}

std::size_t adapter_param_count(std::span<const std::size_t> channel_schedule, const EftConfig& cfg,
                                const AdapterOverheads& overheads) {
  require(!channel_schedule.empty(), "param_count: empty channel schedule");
  std::size_t total = 0;
  for (std::size_t k : channel_schedule) {
    cfg.validate_channels(k);
    total += 9 * cfg.a * k + cfg.b * k;
    if (overheads.conv_bias) total += 2 * k;
    total += overheads.norm_layers_per_conv * 2 * k;
  }
  return total;
}

std::vector<std::size_t> resnet18_channel_schedule(bool include_downsample) {
  std::vector<std::size_t> schedule{64};  // stem
  for (std::size_t stage = 0; stage < 4; ++stage) {
    const std::size_t k = std::size_t{64} << stage;
    for (int conv = 0; conv < 4; ++conv) schedule.push_back(k);
    if (stage > 0 && include_downsample) schedule.push_back(k);
  }
  return schedule;
}

template Var<float> apply_groupwise<float>(Var<float>, Var<float>, std::size_t);
template Var<double> apply_groupwise<double>(Var<double>, Var<double>, std::size_t);
template Var<float> eft_forward<float>(Var<float>, Var<float>, Var<float>, const EftConfig&);
template Var<double> eft_forward<double>(Var<double>, Var<double>, Var<double>, const EftConfig&);
template Tensor eft_forward<float>(const Tensor&, const EftLayer&, const EftConfig&);
template TensorD eft_forward<double>(const TensorD&, const BasicEftLayer<double>&, const EftConfig&);

}  // namespace recycle

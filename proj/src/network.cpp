#include "recycle/network.hpp"

#include <cmath>

#include "recycle/tasks.hpp"

namespace recycle {

void BackboneConfig::validate() const {
  require(!channels.empty(), "BackboneConfig: at least one layer required");
  require(pool_after.size() == channels.size(), "BackboneConfig: pool_after must have one entry per layer");
  require(in_channels >= 1 && image_size >= 1, "BackboneConfig: empty input geometry");
  std::size_t side = image_size;
  for (std::size_t j = 0; j < channels.size(); ++j) {
    require(channels[j] >= 1, "BackboneConfig: zero-width layer");
    if (pool_after[j]) {
      require(side % 2 == 0, "BackboneConfig: pooling an odd spatial extent");
      side /= 2;
    }
  }
}

BackboneConfig BackboneConfig::desk() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::narrow() {
  BackboneConfig c;
  c.channels = {4, 8, 8, 16};
  c.seed = 20240612;
  return c;
}

BackboneConfig BackboneConfig::wide() {
  BackboneConfig c;
  c.channels = {8, 16, 32, 64};
  c.seed = 20240613;
  return c;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"image_size", c.image_size}, {"in_channels", c.in_channels}, {"channels", c.channels},
       {"pool_after", c.pool_after}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.image_size = j.at("image_size").get<std::size_t>();
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.pool_after = j.at("pool_after").get<std::vector<bool>>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

Backbone make_backbone(const BackboneConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Backbone bb{config, {}};
  std::size_t cin = config.in_channels;
  for (std::size_t cout : config.channels) {
    const std::size_t fan_in = 9 * cin;
    // Column c holds the filter of output channel c, flattened as (ky,kx,ci).
    std::vector<std::vector<double>> cols(cout, std::vector<double>(fan_in));
    for (auto& col : cols)
      for (auto& v : col) v = gaussian(rng);
    const double gain = std::sqrt(2.0);
    if (cout <= fan_in) {
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
          double dot = 0;
          for (std::size_t i = 0; i < fan_in; ++i) dot += cols[c][i] * cols[p][i];
          for (std::size_t i = 0; i < fan_in; ++i) cols[c][i] -= dot * cols[p][i];
        }
        double norm = 0;
        for (double v : cols[c]) norm += v * v;
        norm = std::sqrt(norm);
        for (auto& v : cols[c]) v /= norm;
      }
      for (auto& col : cols)
        for (auto& v : col) v *= gain;
    } else {
      for (auto& col : cols)
        for (auto& v : col) v *= gain / std::sqrt(static_cast<double>(fan_in));
    }
    Tensor f(Shape{3, 3, cin, cout});
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < fan_in; ++i) f[i * cout + c] = static_cast<float>(cols[c][i]);
    bb.filters.push_back(std::move(f));
    cin = cout;
  }
  return bb;
}

std::uint64_t backbone_hash(const Backbone& backbone) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : backbone.filters) h = tensor_hash(f, h);
  return h;
}

ParamMap backbone_params(const Backbone& backbone) {
  ParamMap out;
  for (std::size_t j = 0; j < backbone.filters.size(); ++j)
    out.emplace("backbone." + std::to_string(j) + ".conv", backbone.filters[j]);
  return out;
}

Backbone backbone_from_params(const BackboneConfig& config, const ParamMap& params) {
  config.validate();
  Backbone bb{config, {}};
  std::size_t cin = config.in_channels;
  for (std::size_t j = 0; j < config.layers(); ++j) {
    const auto it = params.find("backbone." + std::to_string(j) + ".conv");
    require(it != params.end(), "backbone weights: missing layer " + std::to_string(j));
    if (it->second.shape() != Shape{3, 3, cin, config.channels[j]})
      throw DimensionError("backbone weights", "layer " + std::to_string(j), 9 * cin * config.channels[j],
                           it->second.size());
    bb.filters.push_back(it->second);
    cin = config.channels[j];
  }
  return bb;
}

std::string eft_name(const std::string& prefix, std::size_t layer, const char* bank) {
  return prefix + "." + std::to_string(layer) + "." + bank;
}

std::vector<EftLayer> init_adapters(const BackboneConfig& backbone, const EftConfig& eft, bool random_init,
                                    std::mt19937_64& rng) {
  std::vector<EftLayer> layers;
  for (std::size_t k : backbone.channels)
    layers.push_back(random_init ? eft_random_init(k, eft, rng) : eft_identity_init(k, eft));
  return layers;
}

template <class T>
Var<T> forward_features(Graph<T>& g, const BasicBackbone<T>& backbone, Var<T> images,
                        std::span<const Var<T>> groupwise, std::span<const Var<T>> pointwise, const EftConfig& eft) {
  const auto& cfg = backbone.config;
  if (groupwise.size() != cfg.layers()) throw DimensionError("forward_features", "adapters", cfg.layers(), groupwise.size());
  if (pointwise.size() != cfg.layers()) throw DimensionError("forward_features", "adapters", cfg.layers(), pointwise.size());
  const Shape& in = images.shape();
  if (in.size() != 4) throw DimensionError("forward_features", "images.rank", 4, in.size());
  if (in[1] != cfg.image_size) throw DimensionError("forward_features", "H", cfg.image_size, in[1]);
  if (in[2] != cfg.image_size) throw DimensionError("forward_features", "W", cfg.image_size, in[2]);
  if (in[3] != cfg.in_channels) throw DimensionError("forward_features", "C", cfg.in_channels, in[3]);
  Var<T> h = images;
  for (std::size_t j = 0; j < cfg.layers(); ++j) {
    h = conv2d(h, g.constant(backbone.filters[j]), 1, 1);
    h = eft_forward(h, groupwise[j], pointwise[j], eft);
    h = relu(h);
    if (cfg.pool_after[j]) h = mean_pool2(h);
  }
  return global_mean_pool(h);
}

template <class T>
Var<T> linear_head(Var<T> features, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(features, weight), bias);
}

template <class T>
std::map<std::string, Var<T>> bind_params(Graph<T>& g, const std::map<std::string, BasicTensor<T>>& trainable,
                                          const std::map<std::string, BasicTensor<T>>& frozen) {
  std::map<std::string, Var<T>> vars;
  for (const auto& [name, t] : trainable) vars.emplace(name, g.parameter(name, t));
  for (const auto& [name, t] : frozen) {
    require(!vars.count(name), "bind_params: '" + name + "' is both trainable and frozen");
    vars.emplace(name, g.constant(t));
  }
  return vars;
}

template <class T>
const Var<T>& lookup(const std::map<std::string, Var<T>>& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValidationError("missing parameter '" + name + "'");
  return it->second;
}

template <class T>
Var<T> classifier_logits(Graph<T>& g, const BasicBackbone<T>& backbone, const EftConfig& eft,
                         const std::map<std::string, Var<T>>& vars, const BasicTensor<T>& images,
                         Var<T>* features_out) {
  std::vector<Var<T>> gw, pw;
  for (std::size_t j = 0; j < backbone.config.layers(); ++j) {
    gw.push_back(lookup(vars, eft_name("eft", j, "groupwise")));
    pw.push_back(lookup(vars, eft_name("eft", j, "pointwise")));
  }
  Var<T> f = forward_features<T>(g, backbone, g.constant(images), gw, pw, eft);
  if (features_out) *features_out = f;
  return linear_head(f, lookup(vars, std::string("head.weight")), lookup(vars, std::string("head.bias")));
}

#define RECYCLE_INSTANTIATE(T)                                                                                   \
  template Var<T> forward_features<T>(Graph<T>&, const BasicBackbone<T>&, Var<T>, std::span<const Var<T>>,      \
                                      std::span<const Var<T>>, const EftConfig&);                               \
  template Var<T> linear_head<T>(Var<T>, Var<T>, Var<T>);                                                        \
  template std::map<std::string, Var<T>> bind_params<T>(Graph<T>&, const std::map<std::string, BasicTensor<T>>&, \
                                                        const std::map<std::string, BasicTensor<T>>&);           \
  template const Var<T>& lookup<T>(const std::map<std::string, Var<T>>&, const std::string&);                   \
  template Var<T> classifier_logits<T>(Graph<T>&, const BasicBackbone<T>&, const EftConfig&,                    \
                                       const std::map<std::string, Var<T>>&, const BasicTensor<T>&, Var<T>*);

RECYCLE_INSTANTIATE(float)
RECYCLE_INSTANTIATE(double)

#undef RECYCLE_INSTANTIATE

}  // namespace recycle

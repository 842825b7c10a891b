#include "recycle/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

namespace recycle {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::uint64_t hash_bytes(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Graph

template <class T>
void Graph<T>::check_owner(Var<T> v) const {
  if (v.graph() != this) throw ValidationError("Graph: variable belongs to a different graph");
}

template <class T>
Var<T> Graph<T>::constant(TensorT value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::parameter(const std::string& name, TensorT value) {
  for (const auto& [existing, id] : params_)
    if (existing == name) throw ValidationError("Graph: duplicate parameter '" + name + "'");
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  params_.emplace_back(name, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::record(TensorT value, std::vector<Var<T>> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const auto& in : inputs) {
    check_owner(in);
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
std::vector<std::string> Graph<T>::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_) names.push_back(p.first);
  return names;
}

template <class T>
std::map<std::string, BasicTensor<T>> Graph<T>::backward(Var<T> loss) {
  check_owner(loss);
  const Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) throw DimensionError("backward", "loss", 1, root.value.size());

  std::vector<TensorT> grads(loss.id() + 1);
  std::vector<char> live(loss.id() + 1, 0);
  if (root.requires_grad) {
    grads[loss.id()] = TensorT(root.value.shape(), T(1));
    live[loss.id()] = 1;
  }

  std::vector<const TensorT*> in_values;
  std::vector<TensorT*> in_grads;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!live[id]) continue;
    const Node& node = nodes_[id];
    if (!node.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!live[in]) {
          grads[in] = TensorT(nodes_[in].value.shape());
          live[in] = 1;
        }
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(in_values, node.value, grads[id], in_grads);
    // Intermediate gradients are no longer needed once propagated.
    bool is_param = false;
    for (const auto& p : params_) is_param = is_param || p.second == id;
    if (!is_param) grads[id] = TensorT();
  }

  std::map<std::string, TensorT> out;
  for (const auto& [name, id] : params_) {
    if (id <= loss.id() && live[id])
      out.emplace(name, std::move(grads[id]));
    else
      out.emplace(name, TensorT(nodes_[id].value.shape()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

struct ConvGeometry {
  std::size_t n, h, w, cin, kh, kw, cpg, cout, copg, groups, pad, oh, ow;
};

template <class T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const BasicTensor<T>& filters, std::size_t groups,
                           std::size_t padding) {
  if (input.rank() != 4) throw DimensionError("conv2d", "input.rank", 4, input.rank());
  if (filters.rank() != 4) throw DimensionError("conv2d", "filters.rank", 4, filters.rank());
  if (groups == 0) throw ValidationError("conv2d: groups must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.cin = input.dim(3);
  g.kh = filters.dim(0);
  g.kw = filters.dim(1);
  g.cpg = filters.dim(2);
  g.cout = filters.dim(3);
  g.groups = groups;
  g.pad = padding;
  if (g.cin % groups != 0) throw DimensionError("conv2d", "C_in mod groups", 0, g.cin % groups);
  if (g.cout % groups != 0) throw DimensionError("conv2d", "C_out mod groups", 0, g.cout % groups);
  if (g.cpg != g.cin / groups) throw DimensionError("conv2d", "filter depth", g.cin / groups, g.cpg);
  if (g.h + 2 * padding < g.kh) throw DimensionError("conv2d", "H", g.kh, g.h + 2 * padding);
  if (g.w + 2 * padding < g.kw) throw DimensionError("conv2d", "W", g.kw, g.w + 2 * padding);
  g.copg = g.cout / groups;
  g.oh = g.h + 2 * padding - g.kh + 1;
  g.ow = g.w + 2 * padding - g.kw + 1;
  return g;
}

// Visits every (output pixel, kernel tap) pair whose input pixel is in bounds.
template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const std::size_t out_off = ((n * g.oh + oy) * g.ow + ox) * g.cout;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const std::size_t in_off = ((n * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.cin;
            const std::size_t w_off = (ky * g.kw + kx) * g.cpg * g.cout;
            fn(out_off, in_off, w_off);
          }
        }
      }
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw DimensionError(op, "rank", a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) throw DimensionError(op, "axis " + std::to_string(i), a[i], b[i]);
}

}  // namespace

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& filters, std::size_t groups,
                              std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, filters, groups, padding);
  BasicTensor<T> out(Shape{g.n, g.oh, g.ow, g.cout});
  T* o = out.ptr();
  const T* x = input.ptr();
  const T* w = filters.ptr();
  for_each_tap(g, [&](std::size_t out_off, std::size_t in_off, std::size_t w_off) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      T* orow = o + out_off + grp * g.copg;
      for (std::size_t ci = 0; ci < g.cpg; ++ci) {
        const T v = x[in_off + grp * g.cpg + ci];
        const T* wrow = w + w_off + ci * g.cout + grp * g.copg;
        for (std::size_t co = 0; co < g.copg; ++co) orow[co] += v * wrow[co];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Ops

template <class T>
Var<T> conv2d(Var<T> input, Var<T> filters, std::size_t groups, std::size_t padding) {
  auto out = conv2d_forward(input.value(), filters.value(), groups, padding);
  return input.graph()->record(
      std::move(out), {input, filters},
      [groups, padding](auto in, const auto&, const auto& gout, auto gin) {
        const ConvGeometry g = conv_geometry(*in[0], *in[1], groups, padding);
        const T* x = in[0]->ptr();
        const T* w = in[1]->ptr();
        const T* go = gout.ptr();
        if (gin[0]) {
          T* gx = gin[0]->ptr();
          for_each_tap(g, [&](std::size_t out_off, std::size_t in_off, std::size_t w_off) {
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              const T* grow = go + out_off + grp * g.copg;
              for (std::size_t ci = 0; ci < g.cpg; ++ci) {
                const T* wrow = w + w_off + ci * g.cout + grp * g.copg;
                T acc = 0;
                for (std::size_t co = 0; co < g.copg; ++co) acc += grow[co] * wrow[co];
                gx[in_off + grp * g.cpg + ci] += acc;
              }
            }
          });
        }
        if (gin[1]) {
          T* gw = gin[1]->ptr();
          for_each_tap(g, [&](std::size_t out_off, std::size_t in_off, std::size_t w_off) {
            for (std::size_t grp = 0; grp < g.groups; ++grp) {
              const T* grow = go + out_off + grp * g.copg;
              for (std::size_t ci = 0; ci < g.cpg; ++ci) {
                const T v = x[in_off + grp * g.cpg + ci];
                T* wrow = gw + w_off + ci * g.cout + grp * g.copg;
                for (std::size_t co = 0; co < g.copg; ++co) wrow[co] += v * grow[co];
              }
            }
          });
        }
      });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a.shape(), b.shape());
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph()->record(std::move(out), {a, b}, [](auto, const auto&, const auto& gout, auto gin) {
    for (auto* g : gin)
      if (g)
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += gout[i];
  });
}

template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  if (bias.value().rank() != 1) throw DimensionError("add_bias", "bias.rank", 1, bias.value().rank());
  const std::size_t c = bias.value().size();
  if (a.value().rank() == 0 || a.shape().back() != c) throw DimensionError("add_bias", "channels", c, a.shape().back());
  BasicTensor<T> out = a.value();
  const auto bv = bias.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return a.graph()->record(std::move(out), {a, bias}, [c](auto, const auto&, const auto& gout, auto gin) {
    if (gin[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
    if (gin[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[1])[i % c] += gout[i];
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.graph()->record(std::move(out), {a}, [factor](auto, const auto&, const auto& gout, auto gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += factor * gout[i];
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a.shape(), b.shape());
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph()->record(std::move(out), {a, b}, [](auto in, const auto&, const auto& gout, auto gin) {
    if (gin[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * (*in[1])[i];
    if (gin[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] += gout[i] * (*in[0])[i];
  });
}

template <class T>
Var<T> mix(Var<T> weights, std::span<const Var<T>> inputs) {
  const auto& w = weights.value();
  if (w.rank() != 1) throw DimensionError("mix", "weights.rank", 1, w.rank());
  if (w.size() != inputs.size()) throw DimensionError("mix", "weights", inputs.size(), w.size());
  if (inputs.empty()) throw ValidationError("mix: no inputs");
  BasicTensor<T> out(inputs[0].shape());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    require_same_shape("mix", inputs[0].shape(), inputs[k].shape());
    const auto xv = inputs[k].value().data();
    const T wk = w[k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * xv[i];
  }
  std::vector<Var<T>> all{weights};
  all.insert(all.end(), inputs.begin(), inputs.end());
  return weights.graph()->record(std::move(out), std::move(all), [](auto in, const auto&, const auto& gout, auto gin) {
    const auto& wv = *in[0];
    for (std::size_t k = 0; k + 1 < in.size(); ++k) {
      const auto& xk = *in[k + 1];
      if (gin[0]) {
        double acc = 0;
        for (std::size_t i = 0; i < gout.size(); ++i) acc += static_cast<double>(gout[i]) * xk[i];
        (*gin[0])[k] += static_cast<T>(acc);
      }
      if (gin[k + 1])
        for (std::size_t i = 0; i < gout.size(); ++i) (*gin[k + 1])[i] += wv[k] * gout[i];
    }
  });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2) throw DimensionError("matmul", "a.rank", 2, av.rank());
  if (bv.rank() != 2) throw DimensionError("matmul", "b.rank", 2, bv.rank());
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  if (bv.dim(0) != k) throw DimensionError("matmul", "inner", k, bv.dim(0));
  BasicTensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T v = av[i * k + p];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += v * bv[p * m + j];
    }
  return a.graph()->record(std::move(out), {a, b}, [n, k, m](auto in, const auto&, const auto& gout, auto gin) {
    const auto& x = *in[0];
    const auto& y = *in[1];
    if (gin[0])
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < m; ++j) acc += gout[i * m + j] * y[p * m + j];
          (*gin[0])[i * k + p] += acc;
        }
    if (gin[1])
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T v = x[i * k + p];
          for (std::size_t j = 0; j < m; ++j) (*gin[1])[p * m + j] += v * gout[i * m + j];
        }
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return a.graph()->record(std::move(out), {a}, [](auto in, const auto&, const auto& gout, auto gin) {
    const auto& x = *in[0];
    for (std::size_t i = 0; i < gout.size(); ++i)
      if (x[i] > T(0)) (*gin[0])[i] += gout[i];
  });
}

template <class T>
Var<T> mean_pool2(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() != 4) throw DimensionError("mean_pool2", "rank", 4, x.rank());
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2) throw DimensionError("mean_pool2", "H mod 2", 0, h % 2);
  if (w % 2) throw DimensionError("mean_pool2", "W mod 2", 0, w % 2);
  const std::size_t oh = h / 2, ow = w / 2;
  BasicTensor<T> out(Shape{n, oh, ow, c});
  auto idx = [=](std::size_t b, std::size_t y, std::size_t xx, std::size_t ch) { return ((b * h + y) * w + xx) * c + ch; };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T s = x[idx(b, 2 * y, 2 * xx, ch)] + x[idx(b, 2 * y, 2 * xx + 1, ch)] + x[idx(b, 2 * y + 1, 2 * xx, ch)] +
                      x[idx(b, 2 * y + 1, 2 * xx + 1, ch)];
          out[((b * oh + y) * ow + xx) * c + ch] = s * T(0.25);
        }
  return a.graph()->record(std::move(out), {a}, [=](auto, const auto&, const auto& gout, auto gin) {
    auto& gx = *gin[0];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T g = gout[((b * oh + y) * ow + xx) * c + ch] * T(0.25);
            gx[idx(b, 2 * y, 2 * xx, ch)] += g;
            gx[idx(b, 2 * y, 2 * xx + 1, ch)] += g;
            gx[idx(b, 2 * y + 1, 2 * xx, ch)] += g;
            gx[idx(b, 2 * y + 1, 2 * xx + 1, ch)] += g;
          }
  });
}

template <class T>
Var<T> global_mean_pool(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() != 4) throw DimensionError("global_mean_pool", "rank", 4, x.rank());
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  BasicTensor<T> out(Shape{n, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += x[(b * hw + p) * c + ch];
  const T inv = T(1) / static_cast<T>(hw);
  for (auto& v : out.data()) v *= inv;
  return a.graph()->record(std::move(out), {a}, [n, hw, c, inv](auto, const auto&, const auto& gout, auto gin) {
    auto& gx = *gin[0];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(b * hw + p) * c + ch] += gout[b * c + ch] * inv;
  });
}

template <class T>
Var<T> softmax(Var<T> a) {
  const auto& x = a.value();
  if (x.rank() == 0) throw DimensionError("softmax", "rank", 1, 0);
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * c;
    const double mx = *std::max_element(xr, xr + c);
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(xr[j]) - mx);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = static_cast<T>(std::exp(static_cast<double>(xr[j]) - mx) / z);
  }
  return a.graph()->record(std::move(out), {a}, [rows, c](auto, const auto& y, const auto& gout, auto gin) {
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(gout[r * c + j]) * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*gin[0])[r * c + j] += static_cast<T>(y[r * c + j] * (gout[r * c + j] - dot));
    }
  });
}

template <class T>
Var<T> log(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = std::log(v);
  return a.graph()->record(std::move(out), {a}, [](auto in, const auto&, const auto& gout, auto gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] / (*in[0])[i];
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  double acc = 0;
  for (T v : a.value().data()) acc += v;
  return a.graph()->record(BasicTensor<T>::scalar(static_cast<T>(acc)), {a},
                           [](auto, const auto&, const auto& gout, auto gin) {
                             const T g = gout[0];
                             for (auto& v : gin[0]->data()) v += g;
                           });
}

template <class T>
Var<T> concat_channels(std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ValidationError("concat_channels: no inputs");
  const Shape& first = inputs[0].shape();
  if (first.empty()) throw DimensionError("concat_channels", "rank", 1, 0);
  const std::size_t rows = inputs[0].value().size() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& v : inputs) {
    const Shape& s = v.shape();
    if (s.size() != first.size()) throw DimensionError("concat_channels", "rank", first.size(), s.size());
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
      if (s[i] != first[i]) throw DimensionError("concat_channels", "axis " + std::to_string(i), first[i], s[i]);
    widths.push_back(s.back());
    total += s.back();
  }
  Shape shape = first;
  shape.back() = total;
  BasicTensor<T> out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& x = inputs[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.ptr() + r * widths[k], widths[k], out.ptr() + r * total + offset);
    offset += widths[k];
  }
  std::vector<Var<T>> all(inputs.begin(), inputs.end());
  return inputs[0].graph()->record(std::move(out), std::move(all),
                                   [rows, total, widths](auto, const auto&, const auto& gout, auto gin) {
                                     std::size_t off = 0;
                                     for (std::size_t k = 0; k < widths.size(); ++k) {
                                       if (gin[k])
                                         for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t j = 0; j < widths[k]; ++j)
                                             (*gin[k])[r * widths[k] + j] += gout[r * total + off + j];
                                       off += widths[k];
                                     }
                                   });
}

template <class T>
Var<T> select_row(Var<T> a, std::size_t row) {
  const auto& x = a.value();
  if (x.rank() != 2) throw DimensionError("select_row", "rank", 2, x.rank());
  if (row >= x.dim(0)) throw DimensionError("select_row", "row", x.dim(0), row);
  const std::size_t c = x.dim(1);
  BasicTensor<T> out(Shape{c}, std::vector<T>(x.ptr() + row * c, x.ptr() + (row + 1) * c));
  return a.graph()->record(std::move(out), {a}, [row, c](auto, const auto&, const auto& gout, auto gin) {
    for (std::size_t j = 0; j < c; ++j) (*gin[0])[row * c + j] += gout[j];
  });
}

template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& o = logits.value();
  if (o.rank() != 2) throw DimensionError("softmax_cross_entropy", "rank", 2, o.rank());
  const std::size_t n = o.dim(0), c = o.dim(1);
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy", "labels", n, labels.size());
  if (n == 0) throw ValidationError("softmax_cross_entropy: empty batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                            std::to_string(c) + ")");
  // Probabilities are kept for the backward pass; loss uses log1p for small tails.
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = o.ptr() + i * c;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    const double mx = row[arg];
    double tail = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (j != arg) tail += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log1p(tail);
    total += lse - static_cast<double>(row[labels[i]]);
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(static_cast<double>(row[j]) - lse);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph()->record(
      BasicTensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))), {logits},
      [probs, ys, n, c](auto, const auto&, const auto& gout, auto gin) {
        const double g = static_cast<double>(gout[0]) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double target = static_cast<std::size_t>(ys[i]) == j ? 1.0 : 0.0;
            (*gin[0])[i * c + j] += static_cast<T>(g * ((*probs)[i * c + j] - target));
          }
      });
}

template <class T>
BasicTensor<T> finite_diff_grad(const std::function<double(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                                double eps) {
  if (!(eps > 0)) throw ValidationError("finite_diff_grad: eps must be positive");
  BasicTensor<T> grad(x.shape());
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = static_cast<T>(x[i] + eps);
    const double up = f(probe);
    probe[i] = static_cast<T>(x[i] - eps);
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = static_cast<T>((up - down) / (2 * eps));
  }
  return grad;
}

#define RECYCLE_INSTANTIATE(T)                                                                          \
  template class Graph<T>;                                                                              \
  template BasicTensor<T> conv2d_forward<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, \
                                            std::size_t);                                               \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::size_t, std::size_t);                                  \
  template Var<T> add<T>(Var<T>, Var<T>);                                                               \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                                          \
  template Var<T> scale<T>(Var<T>, T);                                                                  \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                               \
  template Var<T> mix<T>(Var<T>, std::span<const Var<T>>);                                              \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                            \
  template Var<T> relu<T>(Var<T>);                                                                      \
  template Var<T> mean_pool2<T>(Var<T>);                                                                \
  template Var<T> global_mean_pool<T>(Var<T>);                                                          \
  template Var<T> softmax<T>(Var<T>);                                                                   \
  template Var<T> log<T>(Var<T>);                                                                       \
  template Var<T> sum<T>(Var<T>);                                                                       \
  template Var<T> concat_channels<T>(std::span<const Var<T>>);                                          \
  template Var<T> select_row<T>(Var<T>, std::size_t);                                                   \
  template Var<T> softmax_cross_entropy<T>(Var<T>, std::span<const int>);                               \
  template BasicTensor<T> finite_diff_grad<T>(const std::function<double(const BasicTensor<T>&)>&,      \
                                              const BasicTensor<T>&, double);

RECYCLE_INSTANTIATE(float)
RECYCLE_INSTANTIATE(double)

#undef RECYCLE_INSTANTIATE

}  // namespace recycle

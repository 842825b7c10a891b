#pragma once

#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "recycle/tensor.hpp"

namespace recycle {

template <class T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const BasicTensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Graph<T>* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// sequence is already a topological order and backward is a reverse sweep.
template <class T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  // (input values, output value, upstream gradient, input gradients or nullptr)
  using BackwardFn = std::function<void(std::span<const TensorT* const>, const TensorT&, const TensorT&,
                                        std::span<TensorT* const>)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(TensorT value);
  Var<T> parameter(const std::string& name, TensorT value);
  Var<T> record(TensorT value, std::vector<Var<T>> inputs, BackwardFn backward);

  const TensorT& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<std::string> parameter_names() const;

  /// Gradients of a scalar loss for every registered parameter. Parameters
  /// the loss does not reach get an all-zero tensor. Constants never appear.
  std::map<std::string, TensorT> backward(Var<T> loss);

 private:
  struct Node {
    TensorT value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owner(Var<T> v) const;

  std::deque<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

// Primitive set. All shape errors raise DimensionError.

/// Grouped cross-correlation. input [N,H,W,Cin], filters [kH,kW,Cin/groups,Cout].
template <class T>
Var<T> conv2d(Var<T> input, Var<T> filters, std::size_t groups, std::size_t padding);
template <class T>
Var<T> add(Var<T> a, Var<T> b);
/// a [..., C] + bias [C] broadcast over leading axes.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias);
template <class T>
Var<T> scale(Var<T> a, T factor);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
/// Σ_k weights[k] · inputs[k]; weights is rank-1 with one entry per input.
template <class T>
Var<T> mix(Var<T> weights, std::span<const Var<T>> inputs);
template <class T>
Var<T> matmul(Var<T> a, Var<T> b);
template <class T>
Var<T> relu(Var<T> a);
/// 2x2 average pooling with stride 2 on [N,H,W,C]; H and W must be even.
template <class T>
Var<T> mean_pool2(Var<T> a);
/// [N,H,W,C] -> [N,C]
template <class T>
Var<T> global_mean_pool(Var<T> a);
/// Normalized exponential along the last axis.
template <class T>
Var<T> softmax(Var<T> a);
template <class T>
Var<T> log(Var<T> a);
template <class T>
Var<T> sum(Var<T> a);
template <class T>
Var<T> concat_channels(std::span<const Var<T>> inputs);
/// Row r of a rank-2 tensor, as a rank-1 tensor.
template <class T>
Var<T> select_row(Var<T> a, std::size_t row);
/// Mean over the batch of -log softmax(logits)[label]; fused for stability.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels);

/// Forward-only conv kernel shared by the Var op and by feature extraction.
template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& filters, std::size_t groups,
                              std::size_t padding);

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), one coordinate at a time.
template <class T>
BasicTensor<T> finite_diff_grad(const std::function<double(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                                double eps);

}  // namespace recycle

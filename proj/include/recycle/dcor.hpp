#pragma once

#include <span>

#include "recycle/autodiff.hpp"

namespace recycle {

/// Double-centered distance matrix, row-major n x n, kept in double.
struct CenteredDistanceMatrix {
  std::size_t n = 0;
  std::vector<double> entries;

  double operator()(std::size_t k, std::size_t l) const { return entries[k * n + l]; }
};

/// a_kl = ||X_k - X_l|| for a [n, d] matrix, accumulated in double. Needs n >= 2.
template <class T>
TensorD pairwise_dist_matrix(const BasicTensor<T>& x);

/// A = D - row means - column means + grand mean.
CenteredDistanceMatrix double_center(const TensorD& d);

struct DcorValue {
  double value = 0;
  bool degenerate = false;  // one side had zero distance variance
};

/// <A,B> / sqrt(<A,A><B,B>) over double-centered distance matrices.
/// Rows must match; widths may differ. Constant batches give 0 and the flag.
template <class T>
DcorValue dcor(const BasicTensor<T>& x, const BasicTensor<T>& y);

template <class T>
struct DcorVar {
  Var<T> value;
  bool degenerate = false;
};

/// Differentiable dcor. Gradients flow to whichever arguments require them.
template <class T>
DcorVar<T> dcor(Var<T> x, Var<T> y);

template <class T>
struct DcLoss {
  Var<T> value;
  int degenerate = 0;
};

/// sigma * sum_n dcor(sources[n], target), summed in source order.
template <class T>
DcLoss<T> dc_loss_sum(std::span<const Var<T>> sources, Var<T> target, T sigma);

}  // namespace recycle

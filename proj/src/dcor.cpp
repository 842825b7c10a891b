#include "recycle/dcor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace recycle {

namespace {

constexpr double kRadicalFloor = 1e-12;

template <class T>
void check_matrix(const BasicTensor<T>& x, const char* op) {
  if (x.rank() != 2) throw DimensionError(op, "rank", 2, x.rank());
  if (x.dim(0) < 2) throw DimensionError(op, "n", 2, x.dim(0));
}

double inner(const CenteredDistanceMatrix& a, const CenteredDistanceMatrix& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.entries.size(); ++i) s += a.entries[i] * b.entries[i];
  return s;
}

struct DcorState {
  TensorD dist_x, dist_y;
  CenteredDistanceMatrix a, b;
  double saa = 0, sbb = 0, sab = 0;
  double value = 0;
  bool degenerate = false;
};

template <class T>
DcorState dcor_state(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  check_matrix(x, "dcor");
  check_matrix(y, "dcor");
  if (x.dim(0) != y.dim(0)) throw DimensionError("dcor", "n", x.dim(0), y.dim(0));
  DcorState s;
  s.dist_x = pairwise_dist_matrix(x);
  s.dist_y = pairwise_dist_matrix(y);
  s.a = double_center(s.dist_x);
  s.b = double_center(s.dist_y);
  s.saa = inner(s.a, s.a);
  s.sbb = inner(s.b, s.b);
  s.sab = inner(s.a, s.b);
  if (s.saa == 0 || s.sbb == 0) {
    s.degenerate = true;
    return s;
  }
  // Rounding can leave the ratio an ulp outside [0, 1].
  s.value = std::clamp(s.sab / std::sqrt(std::max(s.saa * s.sbb, kRadicalFloor)), 0.0, 1.0);
  return s;
}

// d value / d X for one side: own centered matrix `own`, other side `other`.
template <class T>
void accumulate_grad(const BasicTensor<T>& x, const TensorD& dist, const CenteredDistanceMatrix& own,
                     const CenteredDistanceMatrix& other, double s_own, const DcorState& s, double upstream,
                     BasicTensor<T>& grad) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  const double prod = s.saa * s.sbb;
  const double denom = std::sqrt(std::max(prod, kRadicalFloor));
  const bool floored = prod <= kRadicalFloor;
  std::vector<double> row(d);
  for (std::size_t k = 0; k < n; ++k) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t l = 0; l < n; ++l) {
      const double akl = dist[k * n + l];
      if (l == k || akl == 0) continue;
      double g = other(k, l) / denom;
      if (!floored) g -= s.value * own(k, l) / s_own;
      const double w = 2 * g / akl;
      for (std::size_t c = 0; c < d; ++c)
        row[c] += w * (static_cast<double>(x[k * d + c]) - static_cast<double>(x[l * d + c]));
    }
    for (std::size_t c = 0; c < d; ++c) grad[k * d + c] += static_cast<T>(upstream * row[c]);
  }
}

}  // namespace

template <class T>
TensorD pairwise_dist_matrix(const BasicTensor<T>& x) {
  check_matrix(x, "pairwise_dist_matrix");
  const std::size_t n = x.dim(0), d = x.dim(1);
  TensorD out(Shape{n, n});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = k + 1; l < n; ++l) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(x[k * d + c]) - static_cast<double>(x[l * d + c]);
        s += diff * diff;
      }
      out[k * n + l] = out[l * n + k] = std::sqrt(s);
    }
  return out;
}

CenteredDistanceMatrix double_center(const TensorD& d) {
  if (d.rank() != 2) throw DimensionError("double_center", "rank", 2, d.rank());
  if (d.dim(0) != d.dim(1)) throw DimensionError("double_center", "columns", d.dim(0), d.dim(1));
  const std::size_t n = d.dim(0);
  require(n > 0, "double_center: empty matrix");
  std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
  double grand = 0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) {
      row_mean[k] += d[k * n + l];
      col_mean[l] += d[k * n + l];
    }
  for (std::size_t i = 0; i < n; ++i) {
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
    col_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  CenteredDistanceMatrix out{n, std::vector<double>(n * n)};
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) out.entries[k * n + l] = d[k * n + l] - row_mean[k] - col_mean[l] + grand;
  return out;
}

template <class T>
DcorValue dcor(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  const DcorState s = dcor_state(x, y);
  return {s.value, s.degenerate};
}

template <class T>
DcorVar<T> dcor(Var<T> x, Var<T> y) {
  auto state = std::make_shared<DcorState>(dcor_state(x.value(), y.value()));
  using TensorT = BasicTensor<T>;
  auto out = x.graph()->record(
      TensorT::scalar(static_cast<T>(state->value)), {x, y},
      [state](std::span<const TensorT* const> in, const TensorT&, const TensorT& gout, std::span<TensorT* const> gin) {
        if (state->degenerate) return;
        const double up = static_cast<double>(gout.item());
        if (gin[0]) accumulate_grad(*in[0], state->dist_x, state->a, state->b, state->saa, *state, up, *gin[0]);
        if (gin[1]) accumulate_grad(*in[1], state->dist_y, state->b, state->a, state->sbb, *state, up, *gin[1]);
      });
  return {out, state->degenerate};
}

template <class T>
DcLoss<T> dc_loss_sum(std::span<const Var<T>> sources, Var<T> target, T sigma) {
  require(sigma >= 0, "dc_loss_sum: sigma must be non-negative");
  DcLoss<T> loss;
  Graph<T>& g = *target.graph();
  loss.value = g.constant(BasicTensor<T>::scalar(T(0)));
  for (const auto& src : sources) {
    if (src.value().rank() == 2 && target.value().rank() == 2 && src.value().dim(0) != target.value().dim(0))
      throw DimensionError("dc_loss_sum", "n", target.value().dim(0), src.value().dim(0));
    auto term = dcor(src, target);
    loss.degenerate += term.degenerate ? 1 : 0;
    loss.value = add(loss.value, term.value);
  }
  loss.value = scale(loss.value, sigma);
  return loss;
}

#define RECYCLE_DCOR_INSTANTIATE(T)                                               \
  template TensorD pairwise_dist_matrix<T>(const BasicTensor<T>&);                \
  template DcorValue dcor<T>(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template DcorVar<T> dcor<T>(Var<T>, Var<T>);                                    \
  template DcLoss<T> dc_loss_sum<T>(std::span<const Var<T>>, Var<T>, T);

RECYCLE_DCOR_INSTANTIATE(float)
RECYCLE_DCOR_INSTANTIATE(double)

}  // namespace recycle

#pragma once

#include <memory>
#include <span>
#include <vector>

#include "recycle/mixer.hpp"

namespace recycle {

/// Fitted FastICA map: y = unmixing * whitening * (x - mean).
struct IcaTransformer {
  std::size_t d_in = 0;
  std::size_t n_components = 0;
  std::vector<double> mean;       // d_in
  std::vector<double> whitening;  // n_components x d_in, row-major
  std::vector<double> unmixing;   // n_components x n_components, row-major
  std::vector<double> combined;   // unmixing * whitening
  bool converged = false;
  int iterations = 0;
  double last_delta = 0;
};

struct IcaOptions {
  int max_iter = 200;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

/// Center, whiten from the covariance eigendecomposition (eigenvalues floored
/// at 1e-10), then run the tanh fixed-point iteration with symmetric
/// decorrelation until max |(|diag(W_new W^T)| - 1)| < tol or max_iter.
IcaTransformer fastica_fit(const TensorD& x, std::size_t n_components, const IcaOptions& opts = {});
IcaTransformer fastica_fit(const Tensor& x, std::size_t n_components, const IcaOptions& opts = {});

/// Applies the frozen map row by row; each row's result does not depend on
/// the other rows.
TensorD fastica_transform(const IcaTransformer& t, const TensorD& x);
Tensor fastica_transform(const IcaTransformer& t, const Tensor& x);

/// Feature-only access to a source model. Implementations must not expose weights.
class FeatureApi {
 public:
  virtual ~FeatureApi() = default;
  virtual int id() const = 0;
  virtual std::size_t dim() const = 0;
  /// Pre-classifier features for [N,H,W,C] images, [N, dim()].
  virtual Tensor features(const Tensor& images) const = 0;
};

/// A pool model served through FeatureApi; the record stays private.
class PoolModelApi final : public FeatureApi {
 public:
  PoolModelApi(SourceModelRecord record, Backbone backbone);
  int id() const override { return record_.id; }
  std::size_t dim() const override { return record_.feature_dim; }
  Tensor features(const Tensor& images) const override;

 private:
  SourceModelRecord record_;
  Backbone backbone_;
};

struct BlackboxModel {
  MixedModel model;
  std::vector<IcaTransformer> ica;  // one per API, fit once on target train features
};

/// Feature-mixing model over black-box APIs. Each API's features are reduced
/// to the target width by FastICA fit on the target train rows; the DC term
/// sees the raw API features.
BlackboxModel build_blackbox_model(std::span<const FeatureApi* const> apis, const Backbone& target_backbone,
                                   const EftConfig& eft, const TaskSpec& task, const TrainConfig& cfg);

}  // namespace recycle

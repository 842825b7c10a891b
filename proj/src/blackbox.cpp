#include "recycle/blackbox.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace recycle {

namespace {

constexpr double kEigenFloor = 1e-10;

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Eigenvectors are only defined up to sign; pin the largest-magnitude entry positive.
void fix_signs(Eigen::MatrixXd& vecs) {
  for (Eigen::Index c = 0; c < vecs.cols(); ++c) {
    Eigen::Index arg = 0;
    vecs.col(c).cwiseAbs().maxCoeff(&arg);
    if (vecs(arg, c) < 0) vecs.col(c) *= -1.0;
  }
}

// W <- (W W^T)^{-1/2} W
Mat symmetric_decorrelation(const Mat& w) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * w.transpose());
  Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(kEigenFloor).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

std::vector<double> to_vector(const Mat& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

}  // namespace

IcaTransformer fastica_fit(const TensorD& x, std::size_t n_components, const IcaOptions& opts) {
  if (x.rank() != 2) throw DimensionError("fastica_fit", "rank", 2, x.rank());
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n_components == 0 || n_components > d)
    throw ValidationError("fastica_fit: n_components=" + std::to_string(n_components) + " must lie in [1, " +
                          std::to_string(d) + "]");
  if (d > n) throw ValidationError("fastica_fit: need at least d_in=" + std::to_string(d) + " rows, got " + std::to_string(n));
  require(opts.tol > 0, "fastica_fit: tol must be positive");
  require(opts.max_iter >= 1, "fastica_fit: max_iter must be positive");

  IcaTransformer t;
  t.d_in = d;
  t.n_components = n_components;
  t.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) t.mean[c] += x[i * d + c];
  for (auto& v : t.mean) v /= static_cast<double>(n);

  Mat xc(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) xc(i, c) = x[i * d + c] - t.mean[c];
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::MatrixXd vecs = es.eigenvectors();
  fix_signs(vecs);
  // Eigenvalues come ascending; keep the largest n_components.
  Mat k(n_components, d);
  for (std::size_t i = 0; i < n_components; ++i) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - i);
    const double lam = std::max(es.eigenvalues()(col), kEigenFloor);
    k.row(static_cast<Eigen::Index>(i)) = vecs.col(col).transpose() / std::sqrt(lam);
  }
  const Mat xw = k * xc.transpose();  // n_components x n

  std::mt19937_64 rng(derive_seed(opts.seed, 0x1caULL));
  Mat w(n_components, n_components);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = gaussian(rng);
  w = symmetric_decorrelation(w);

  const double inv_n = 1.0 / static_cast<double>(n);
  for (int it = 1; it <= opts.max_iter; ++it) {
    Mat gz = (w * xw).array().tanh().matrix();
    const Eigen::VectorXd g_prime_mean = (1.0 - gz.array().square()).matrix().rowwise().sum() * inv_n;
    Mat w_new = (gz * xw.transpose()) * inv_n - g_prime_mean.asDiagonal() * w;
    w_new = symmetric_decorrelation(w_new);
    const double delta = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = std::move(w_new);
    t.iterations = it;
    t.last_delta = delta;
    if (delta < opts.tol) {
      t.converged = true;
      break;
    }
  }
  t.whitening = to_vector(k);
  t.unmixing = to_vector(w);
  t.combined = to_vector(w * k);
  return t;
}

IcaTransformer fastica_fit(const Tensor& x, std::size_t n_components, const IcaOptions& opts) {
  return fastica_fit(x.cast<double>(), n_components, opts);
}

TensorD fastica_transform(const IcaTransformer& t, const TensorD& x) {
  if (x.rank() != 2) throw DimensionError("fastica_transform", "rank", 2, x.rank());
  if (x.dim(1) != t.d_in) throw DimensionError("fastica_transform", "d_in", t.d_in, x.dim(1));
  const std::size_t n = x.dim(0), d = t.d_in, p = t.n_components;
  TensorD out(Shape{n, p});
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) centered[c] = x[i * d + c] - t.mean[c];
    for (std::size_t r = 0; r < p; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += t.combined[r * d + c] * centered[c];
      out[i * p + r] = s;
    }
  }
  return out;
}

Tensor fastica_transform(const IcaTransformer& t, const Tensor& x) {
  return fastica_transform(t, x.cast<double>()).cast<float>();
}

PoolModelApi::PoolModelApi(SourceModelRecord record, Backbone backbone)
    : record_(std::move(record)), backbone_(std::move(backbone)) {
  record_.validate(backbone_.config);
}

Tensor PoolModelApi::features(const Tensor& images) const {
  return extract_features(backbone_, record_.eft, record_.adapters, images);
}

BlackboxModel build_blackbox_model(std::span<const FeatureApi* const> apis, const Backbone& target_backbone,
                                   const EftConfig& eft, const TaskSpec& task, const TrainConfig& cfg) {
  for (std::size_t k : target_backbone.config.channels) eft.validate_channels(k);
  require(!task.train.empty(), "build_blackbox_model: empty train split");
  const std::size_t d_t = target_backbone.config.feature_dim();
  BlackboxModel out;
  MixedModel& model = out.model;
  model.eft = eft;
  model.mode = MixMode::FeaturesOnly;
  model.layers = target_backbone.config.layers();
  model.classes = task.num_classes();
  model.trainable = init_classifier(target_backbone.config, eft, task.num_classes(), cfg.random_new_init, cfg.seed);
  model.trainable.emplace("mix.logits", init_mixing(cfg.lambda_new, apis.size(), model.layers).logits);
  for (std::size_t n = 0; n < apis.size(); ++n) {
    const FeatureApi& api = *apis[n];
    if (api.dim() < d_t)
      throw ValidationError("build_blackbox_model: API " + std::to_string(api.id()) + " width " +
                            std::to_string(api.dim()) + " is below the target width " + std::to_string(d_t));
    const Tensor raw = api.features(task.images);
    if (raw.rank() != 2 || raw.dim(1) != api.dim()) throw DimensionError("build_blackbox_model", "api width", api.dim(), raw.size());
    IcaTransformer ica =
        fastica_fit(gather_rows(raw, task.train), d_t, IcaOptions{200, 1e-4, derive_seed(cfg.seed, 0xb1ac, n)});
    model.source_ids.push_back(api.id());
    model.source_features.push_back(fastica_transform(ica, raw));
    model.dc_features.push_back(raw);
    out.ica.push_back(std::move(ica));
  }
  return out;
}

}  // namespace recycle

#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "recycle/experiment.hpp"

namespace testutil {

using namespace recycle;

template <class T = double>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * gaussian(rng));
  return t;
}

/// 6x6 input, two layers, one pooling step; small enough for finite differences.
inline BackboneConfig micro_backbone() {
  BackboneConfig c;
  c.image_size = 6;
  c.channels = {2, 4};
  c.pool_after = {false, true};
  c.seed = 5;
  return c;
}

/// Two classes separated by which half of the image is bright.
inline TaskSpec halves_task(std::size_t per_class, std::size_t image_size, std::uint64_t seed, double noise = 0.3) {
  std::mt19937_64 rng(seed);
  TaskSpec t;
  t.id = "halves";
  t.family = "halves";
  t.classes = {0, 1};
  const std::size_t n = 2 * per_class;
  t.images = Tensor(Shape{n, image_size, image_size, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const bool left = x < image_size / 2;
        const double base = (left == (label == 0)) ? 1.0 : -1.0;
        t.images[(i * image_size + y) * image_size + x] = static_cast<float>(base + noise * gaussian(rng));
      }
    t.labels.push_back(label);
    t.sample_ids.push_back(i);
    const std::size_t slot = i % 10;
    (slot < 6 ? t.train : slot < 8 ? t.val : t.test).push_back(i);
  }
  t.validate();
  return t;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           (tag + "-" + std::to_string(std::random_device{}()) + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

/// Largest |a - b| / max(1, |a|, |b|) over matching entries.
template <class T>
double max_rel_err(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
  }
  return worst;
}

}  // namespace testutil

namespace testutil {

/// Analytic gradient of build(g, x) w.r.t. x against central differences, in double.
template <class Build>
double grad_check(const TensorD& x0, Build build, double eps = 1e-6) {
  Graph<double> g;
  Var<double> x = g.parameter("x", x0);
  const TensorD analytic = g.backward(build(g, x)).at("x");
  const TensorD numeric = finite_diff_grad<double>(
      [&](const TensorD& x1) {
        Graph<double> h;
        return build(h, h.constant(x1)).value().item();
      },
      x0, eps);
  return max_rel_err(analytic, numeric);
}

}  // namespace testutil

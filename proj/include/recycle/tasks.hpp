#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/tensor.hpp"

namespace recycle {

/// A labeled classification task. Labels are local indices into `classes`;
/// split vectors index rows of `images`.
struct TaskSpec {
  std::string id;
  std::string family;
  std::vector<int> classes;  // global class ids, label i <-> classes[i]
  Tensor images;             // [N,H,W,C]
  std::vector<int> labels;
  std::vector<std::uint64_t> sample_ids;  // provenance of each row (class, draw index)
  std::vector<std::size_t> train, val, test;
  std::optional<std::size_t> subset_size;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_samples() const { return labels.size(); }

  /// Splits disjoint and in range, labels in range, every class present in train.
  void validate() const;
};

/// Draws `e` training rows (every class represented when e allows it).
/// When `carve_validation` is set, 10% of the drawn rows become the
/// validation split; otherwise the task's own validation split is kept.
TaskSpec draw_subset(const TaskSpec& task, std::size_t e, std::uint64_t seed, bool carve_validation);

/// Returns the task with 10% of train held out as validation if it has none.
TaskSpec ensure_validation(const TaskSpec& task, std::uint64_t seed);

/// Rows of a split as a [n,H,W,C] tensor plus labels.
struct SplitData {
  Tensor images;
  std::vector<int> labels;
};
SplitData split_data(const TaskSpec& task, const std::vector<std::size_t>& rows);

// ---------------------------------------------------------------------------
// Synthetic generators. Each class is a texture made of oriented gratings in
// a frequency band owned by its family (or superclass); samples add random
// phase, family-specific nuisance gratings and pixel noise.

struct SyntheticImageConfig {
  std::size_t image_size = 16;
  double pixel_noise = 1.0;
  double nuisance_scale = 1.2;
};

struct FamilySuiteDims {
  SyntheticImageConfig image;
  std::size_t classes_per_family = 8;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 40;
  std::size_t val_per_class = 10;
  std::size_t test_per_class = 30;
};

/// Tasks ordered family-major; ids "f<family>-t<task>", family tag "family-<f>".
std::vector<TaskSpec> gen_family_suite(std::size_t n_families, std::size_t tasks_per_family,
                                       const FamilySuiteDims& dims, std::uint64_t seed);

struct OverlapSuiteDims {
  SyntheticImageConfig image;
  std::size_t train_per_class = 40;  // per task that holds the class
  std::size_t test_per_class = 20;
};

/// The first n_tasks/2 tasks partition the classes into consecutive
/// superclass groups; the second half regroups a seeded permutation of all
/// classes. Each class therefore appears in exactly two tasks, and its two
/// tasks receive disjoint halves of its samples. Validation splits are empty.
std::vector<TaskSpec> gen_overlap_suite(std::size_t n_tasks, std::size_t classes_per_task, std::uint64_t seed,
                                        const OverlapSuiteDims& dims = {});

// ---------------------------------------------------------------------------
// Serialization: <dir>/<id>.json (metadata) + <dir>/<id>.bin (image blob).

nlohmann::json task_metadata(const TaskSpec& task);
void save_task(const std::filesystem::path& dir, const TaskSpec& task);
TaskSpec load_task(const std::filesystem::path& json_path);

/// Writes every task and a suite.json listing them in order.
void save_suite(const std::filesystem::path& dir, const std::vector<TaskSpec>& tasks, const nlohmann::json& params);
std::vector<TaskSpec> load_suite(const std::filesystem::path& dir);

/// splitmix64 step; used to derive independent seeds from (seed, index...).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

/// Uniform on [0,1) from the top 53 bits of one engine draw.
double uniform01(std::mt19937_64& rng);
/// Standard normal via Box-Muller, two engine draws per call.
double gaussian(std::mt19937_64& rng);

/// Fisher-Yates with an explicit engine so results do not depend on the
/// standard library's shuffle implementation.
template <class Vec>
void seeded_shuffle(Vec& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace recycle

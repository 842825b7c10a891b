#include "recycle/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "recycle/blob_io.hpp"

namespace recycle {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gaussian(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

struct Grating {
  double freq;   // cycles per pixel
  double theta;  // orientation
  double amp;
};

struct TextureFamily {
  double band_lo, band_hi;
  double base_theta;
  std::vector<Grating> nuisance;
};

struct ClassTexture {
  std::vector<Grating> components;
};

TextureFamily make_family(double band_lo, double band_hi, std::mt19937_64& rng) {
  TextureFamily fam{band_lo, band_hi, uniform(rng, 0.0, std::numbers::pi), {}};
  for (int q = 0; q < 2; ++q) fam.nuisance.push_back({uniform(rng, band_lo, band_hi), uniform(rng, 0.0, std::numbers::pi), 1.0});
  return fam;
}

ClassTexture make_class(const TextureFamily& fam, std::size_t local, std::size_t n_classes, std::mt19937_64& rng) {
  const double theta = fam.base_theta + std::numbers::pi * (static_cast<double>(local) + uniform(rng, -0.15, 0.15)) /
                                            static_cast<double>(n_classes);
  ClassTexture tex;
  tex.components.push_back({uniform(rng, fam.band_lo, fam.band_hi), theta, 1.0});
  tex.components.push_back(
      {uniform(rng, fam.band_lo, fam.band_hi), theta + uniform(rng, 0.25, 0.75) * std::numbers::pi, 0.7});
  return tex;
}

void render(const TextureFamily& fam, const ClassTexture& tex, const SyntheticImageConfig& img, std::uint64_t seed,
            float* out) {
  std::mt19937_64 rng(seed);
  const std::size_t s = img.image_size;
  std::vector<double> pix(s * s, 0.0);
  auto add_grating = [&](const Grating& gr, double amp) {
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double cx = std::cos(gr.theta), sy = std::sin(gr.theta);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        pix[y * s + x] += amp * std::cos(2.0 * std::numbers::pi * gr.freq * (cx * static_cast<double>(x) + sy * static_cast<double>(y)) + phase);
  };
  for (const auto& gr : tex.components) add_grating(gr, gr.amp * uniform(rng, 0.75, 1.25));
  for (const auto& gr : fam.nuisance) add_grating(gr, img.nuisance_scale * gaussian(rng));
  for (std::size_t i = 0; i < s * s; ++i) out[i] = static_cast<float>(pix[i] + img.pixel_noise * gaussian(rng));
}

std::vector<double> band_edges(std::size_t n) {
  // [0.06, 0.46] cycles/pixel split into n contiguous bands.
  std::vector<double> edges(n + 1);
  for (std::size_t i = 0; i <= n; ++i) edges[i] = 0.06 + 0.40 * static_cast<double>(i) / static_cast<double>(n);
  return edges;
}

struct SampleRequest {
  const TextureFamily* family;
  const ClassTexture* texture;
  int label;
  std::uint64_t sample_id;
  std::uint64_t render_seed;
};

TaskSpec assemble(std::string id, std::string family, std::vector<int> classes, const std::vector<SampleRequest>& train,
                  const std::vector<SampleRequest>& val, const std::vector<SampleRequest>& test,
                  const SyntheticImageConfig& img) {
  TaskSpec task;
  task.id = std::move(id);
  task.family = std::move(family);
  task.classes = std::move(classes);
  const std::size_t n = train.size() + val.size() + test.size();
  const std::size_t s = img.image_size;
  task.images = Tensor(Shape{n, s, s, 1});
  std::size_t row = 0;
  auto emit = [&](const std::vector<SampleRequest>& reqs, std::vector<std::size_t>& split) {
    for (const auto& r : reqs) {
      render(*r.family, *r.texture, img, r.render_seed, task.images.ptr() + row * s * s);
      task.labels.push_back(r.label);
      task.sample_ids.push_back(r.sample_id);
      split.push_back(row++);
    }
  };
  emit(train, task.train);
  emit(val, task.val);
  emit(test, task.test);
  return task;
}

std::uint64_t sample_id(std::size_t cls, std::size_t draw) { return static_cast<std::uint64_t>(cls) * 1000000ULL + draw; }

}  // namespace

void TaskSpec::validate() const {
  require(!classes.empty(), "task " + id + ": no classes");
  if (images.rank() != 4) throw DimensionError("task " + id, "images.rank", 4, images.rank());
  if (images.dim(0) != labels.size()) throw DimensionError("task " + id, "rows", images.dim(0), labels.size());
  require(sample_ids.empty() || sample_ids.size() == labels.size(), "task " + id + ": sample_ids length mismatch");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < classes.size(), "task " + id + ": label out of range");
  std::vector<char> seen(labels.size(), 0);
  for (const auto* split : {&train, &val, &test})
    for (std::size_t r : *split) {
      require(r < labels.size(), "task " + id + ": split index out of range");
      require(!seen[r], "task " + id + ": splits overlap at row " + std::to_string(r));
      seen[r] = 1;
    }
  std::vector<char> present(classes.size(), 0);
  for (std::size_t r : train) present[static_cast<std::size_t>(labels[r])] = 1;
  for (std::size_t c = 0; c < classes.size(); ++c)
    require(present[c], "task " + id + ": class " + std::to_string(classes[c]) + " missing from train");
}

TaskSpec draw_subset(const TaskSpec& task, std::size_t e, std::uint64_t seed, bool carve_validation) {
  require(e >= 1 && e <= task.train.size(), "draw_subset: e must lie in [1, |train|]");
  std::mt19937_64 rng(derive_seed(seed, 0x5b5e7ULL, e));
  // Per-class shuffled queues, drained round-robin so small e still covers classes.
  std::vector<std::vector<std::size_t>> by_class(task.num_classes());
  for (std::size_t r : task.train) by_class[static_cast<std::size_t>(task.labels[r])].push_back(r);
  for (auto& q : by_class) seeded_shuffle(q, rng);
  std::vector<std::size_t> picked;
  for (std::size_t round = 0; picked.size() < e; ++round)
    for (auto& q : by_class)
      if (round < q.size() && picked.size() < e) picked.push_back(q[round]);
  seeded_shuffle(picked, rng);

  TaskSpec out = task;
  out.subset_size = e;
  if (carve_validation) {
    const std::size_t n_val = std::max<std::size_t>(1, (e + 5) / 10);
    // Validation rows are taken from the end, skipping rows whose class would vanish from train.
    std::vector<std::size_t> counts(task.num_classes(), 0);
    for (std::size_t r : picked) ++counts[static_cast<std::size_t>(task.labels[r])];
    out.train.clear();
    out.val.clear();
    for (std::size_t i = picked.size(); i-- > 0;) {
      const auto cls = static_cast<std::size_t>(task.labels[picked[i]]);
      if (out.val.size() < n_val && counts[cls] > 1) {
        out.val.push_back(picked[i]);
        --counts[cls];
      } else {
        out.train.push_back(picked[i]);
      }
    }
    std::reverse(out.train.begin(), out.train.end());
    std::reverse(out.val.begin(), out.val.end());
  } else {
    out.train = picked;
  }
  return out;
}

TaskSpec ensure_validation(const TaskSpec& task, std::uint64_t seed) {
  if (!task.val.empty()) return task;
  TaskSpec out = draw_subset(task, task.train.size(), seed, true);
  out.subset_size = task.subset_size;
  return out;
}

SplitData split_data(const TaskSpec& task, const std::vector<std::size_t>& rows) {
  SplitData d;
  d.images = gather_rows(task.images, rows);
  for (std::size_t r : rows) d.labels.push_back(task.labels.at(r));
  return d;
}

std::vector<TaskSpec> gen_family_suite(std::size_t n_families, std::size_t tasks_per_family,
                                       const FamilySuiteDims& dims, std::uint64_t seed) {
  require(n_families >= 1 && tasks_per_family >= 1, "gen_family_suite: counts must be positive");
  require(dims.classes_per_task >= 2 && dims.classes_per_task <= dims.classes_per_family,
          "gen_family_suite: need 2 <= classes_per_task <= classes_per_family");
  require(dims.train_per_class >= 1 && dims.test_per_class >= 1, "gen_family_suite: empty splits");
  require(dims.image.image_size >= 4, "gen_family_suite: image too small");

  // Bands are assigned to families through a seeded permutation.
  const auto edges = band_edges(n_families);
  std::vector<std::size_t> band_of(n_families);
  for (std::size_t f = 0; f < n_families; ++f) band_of[f] = f;
  std::mt19937_64 suite_rng(derive_seed(seed, 0xfa111e5ULL));
  seeded_shuffle(band_of, suite_rng);

  std::vector<TaskSpec> tasks;
  for (std::size_t f = 0; f < n_families; ++f) {
    std::mt19937_64 frng(derive_seed(seed, 0xf00dULL, f));
    const TextureFamily fam = make_family(edges[band_of[f]], edges[band_of[f] + 1], frng);
    std::vector<ClassTexture> textures;
    for (std::size_t c = 0; c < dims.classes_per_family; ++c)
      textures.push_back(make_class(fam, c, dims.classes_per_family, frng));

    for (std::size_t t = 0; t < tasks_per_family; ++t) {
      std::mt19937_64 trng(derive_seed(seed, 0x7a5cULL, f, t));
      std::vector<std::size_t> pool(dims.classes_per_family);
      for (std::size_t c = 0; c < pool.size(); ++c) pool[c] = c;
      seeded_shuffle(pool, trng);
      pool.resize(dims.classes_per_task);
      std::sort(pool.begin(), pool.end());

      std::vector<int> classes;
      std::vector<SampleRequest> train, val, test;
      for (std::size_t li = 0; li < pool.size(); ++li) {
        const std::size_t global = f * dims.classes_per_family + pool[li];
        classes.push_back(static_cast<int>(global));
        auto push = [&](std::vector<SampleRequest>& dst, std::size_t count, std::size_t offset) {
          for (std::size_t i = 0; i < count; ++i) {
            // Draw indices are per task so two tasks sharing a class get distinct samples.
            const std::size_t draw = t * 100000 + offset + i;
            dst.push_back({&fam, &textures[pool[li]], static_cast<int>(li), sample_id(global, draw),
                           derive_seed(seed, 0x5a3eULL, global, draw)});
          }
        };
        push(train, dims.train_per_class, 0);
        push(val, dims.val_per_class, dims.train_per_class);
        push(test, dims.test_per_class, dims.train_per_class + dims.val_per_class);
      }
      // Interleave classes within each split.
      seeded_shuffle(train, trng);
      seeded_shuffle(val, trng);
      seeded_shuffle(test, trng);
      tasks.push_back(assemble("f" + std::to_string(f) + "-t" + std::to_string(t), "family-" + std::to_string(f),
                               std::move(classes), train, val, test, dims.image));
    }
  }
  return tasks;
}

std::vector<TaskSpec> gen_overlap_suite(std::size_t n_tasks, std::size_t classes_per_task, std::uint64_t seed,
                                        const OverlapSuiteDims& dims) {
  if (n_tasks < 2 || n_tasks % 2 != 0 || classes_per_task < 2)
    throw ValidationError("gen_overlap_suite: infeasible budget (need an even task count >= 2 and >= 2 classes per task "
                          "so every class appears in exactly two tasks)");
  require(dims.train_per_class >= 1 && dims.test_per_class >= 1, "gen_overlap_suite: empty splits");
  const std::size_t half = n_tasks / 2;
  const std::size_t n_classes = half * classes_per_task;

  // One texture family per superclass group.
  const auto edges = band_edges(half);
  std::vector<TextureFamily> families;
  std::vector<ClassTexture> textures(n_classes);
  for (std::size_t s = 0; s < half; ++s) {
    std::mt19937_64 frng(derive_seed(seed, 0x0e1a9ULL, s));
    // Neighbouring superclasses share overlapping bands; widen each band by half a slot on both sides.
    const double width = edges[1] - edges[0];
    families.push_back(make_family(std::max(0.04, edges[s] - 0.5 * width), std::min(0.48, edges[s + 1] + 0.5 * width), frng));
    for (std::size_t c = 0; c < classes_per_task; ++c)
      textures[s * classes_per_task + c] = make_class(families.back(), c, classes_per_task, frng);
  }

  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t s = 0; s < half; ++s) {
    std::vector<std::size_t> g;
    for (std::size_t c = 0; c < classes_per_task; ++c) g.push_back(s * classes_per_task + c);
    groups.push_back(std::move(g));
  }
  std::vector<std::size_t> perm(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) perm[c] = c;
  std::mt19937_64 prng(derive_seed(seed, 0x9e7ULL));
  seeded_shuffle(perm, prng);
  for (std::size_t t = 0; t < half; ++t)
    groups.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(t * classes_per_task),
                        perm.begin() + static_cast<std::ptrdiff_t>((t + 1) * classes_per_task));

  std::vector<int> uses(n_classes, 0);
  const std::size_t per_half = dims.train_per_class + dims.test_per_class;
  std::vector<TaskSpec> tasks;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    std::mt19937_64 trng(derive_seed(seed, 0x7a5cULL, t));
    std::vector<int> classes;
    std::vector<SampleRequest> train, test;
    for (std::size_t li = 0; li < groups[t].size(); ++li) {
      const std::size_t cls = groups[t][li];
      const std::size_t h = static_cast<std::size_t>(uses[cls]++);
      classes.push_back(static_cast<int>(cls));
      const TextureFamily& fam = families[cls / classes_per_task];
      for (std::size_t i = 0; i < per_half; ++i) {
        const std::size_t draw = h * per_half + i;
        SampleRequest req{&fam, &textures[cls], static_cast<int>(li), sample_id(cls, draw),
                          derive_seed(seed, 0x5a3eULL, cls, draw)};
        (i < dims.train_per_class ? train : test).push_back(req);
      }
    }
    seeded_shuffle(train, trng);
    seeded_shuffle(test, trng);
    tasks.push_back(assemble("c" + std::to_string(t), t < half ? "superclass-" + std::to_string(t) : "mixed",
                             std::move(classes), train, {}, test, dims.image));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json task_metadata(const TaskSpec& task) {
  nlohmann::json j;
  j["id"] = task.id;
  j["family"] = task.family;
  j["classes"] = task.classes;
  j["labels"] = task.labels;
  j["sample_ids"] = task.sample_ids;
  j["train"] = task.train;
  j["val"] = task.val;
  j["test"] = task.test;
  j["subset_size"] = task.subset_size ? nlohmann::json(*task.subset_size) : nlohmann::json(nullptr);
  j["image_shape"] = task.images.shape();
  j["images_file"] = task.id + ".bin";
  return j;
}

void save_task(const std::filesystem::path& dir, const TaskSpec& task) {
  task.validate();
  std::ostringstream blob(std::ios::binary);
  write_blob(blob, task.images);
  write_file_atomic(dir / (task.id + ".bin"), blob.str());
  write_file_atomic(dir / (task.id + ".json"), task_metadata(task).dump(1) + "\n");
}

TaskSpec load_task(const std::filesystem::path& json_path) {
  const auto j = nlohmann::json::parse(read_file(json_path));
  TaskSpec task;
  task.id = j.at("id").get<std::string>();
  task.family = j.at("family").get<std::string>();
  task.classes = j.at("classes").get<std::vector<int>>();
  task.labels = j.at("labels").get<std::vector<int>>();
  task.sample_ids = j.at("sample_ids").get<std::vector<std::uint64_t>>();
  task.train = j.at("train").get<std::vector<std::size_t>>();
  task.val = j.at("val").get<std::vector<std::size_t>>();
  task.test = j.at("test").get<std::vector<std::size_t>>();
  if (!j.at("subset_size").is_null()) task.subset_size = j.at("subset_size").get<std::size_t>();
  std::ifstream in(json_path.parent_path() / j.at("images_file").get<std::string>(), std::ios::binary);
  if (!in) throw std::runtime_error("task " + task.id + ": missing image blob");
  task.images = read_blob(in);
  if (task.images.shape() != j.at("image_shape").get<Shape>())
    throw ValidationError("task " + task.id + ": image blob shape disagrees with metadata");
  task.validate();
  return task;
}

void save_suite(const std::filesystem::path& dir, const std::vector<TaskSpec>& tasks, const nlohmann::json& params) {
  nlohmann::json manifest;
  manifest["params"] = params;
  manifest["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    save_task(dir, t);
    manifest["tasks"].push_back({{"id", t.id}, {"family", t.family}, {"classes", t.classes}, {"file", t.id + ".json"}});
  }
  write_file_atomic(dir / "suite.json", manifest.dump(1) + "\n");
}

std::vector<TaskSpec> load_suite(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "suite.json"));
  std::vector<TaskSpec> tasks;
  for (const auto& entry : manifest.at("tasks")) tasks.push_back(load_task(dir / entry.at("file").get<std::string>()));
  return tasks;
}

}  // namespace recycle

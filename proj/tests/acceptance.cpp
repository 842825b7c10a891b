// Acceptance checks. One line per criterion: "criterion N PASS|FAIL <detail> (<seconds> s)".
// Usage: acceptance [N ...]   (no arguments runs all eleven)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "helpers.hpp"
#include "recycle/blob_io.hpp"

using namespace recycle;
using testutil::max_rel_err;
using testutil::random_tensor;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup: the family suite (3 families x 11 tasks), tasks 0..3
// of every family form the source pool, tasks 4..10 are targets.

constexpr std::size_t kFamilies = 3, kTasksPerFamily = 11, kSourcesPerFamily = 4;
constexpr std::uint64_t kSuiteSeed = 7;
constexpr int kSeeds = 20;

struct Desk {
  std::vector<TaskSpec> suite;
  Backbone backbone;
  std::vector<SourceModelRecord> pool;
  double build_seconds = 0;
};

const TaskSpec& target_task(const Desk& d, int seed) {
  const std::size_t f = static_cast<std::size_t>(seed) % kFamilies;
  const std::size_t t = kSourcesPerFamily + (static_cast<std::size_t>(seed) / kFamilies) % (kTasksPerFamily - kSourcesPerFamily);
  return d.suite[f * kTasksPerFamily + t];
}

Desk& desk() {
  static std::optional<Desk> d;
  if (!d) {
    const auto t0 = Clock::now();
    d.emplace();
    d->suite = gen_family_suite(kFamilies, kTasksPerFamily, FamilySuiteDims{}, kSuiteSeed);
    d->backbone = make_backbone(BackboneConfig::desk());
    for (std::size_t f = 0; f < kFamilies; ++f)
      for (std::size_t t = 0; t < kSourcesPerFamily; ++t) {
        SourceModelRecord rec = train_source(d->suite[f * kTasksPerFamily + t], d->backbone, EftConfig::desk(),
                                             desk_source_config());
        rec.id = static_cast<int>(d->pool.size());
        d->pool.push_back(std::move(rec));
      }
    d->build_seconds = seconds_since(t0);
  }
  return *d;
}

SourceModelRecord random_record(const BackboneConfig& bc, int id, std::size_t classes, std::uint64_t seed) {
  SourceModelRecord rec;
  rec.id = id;
  rec.eft = EftConfig{2, 1, 1};
  for (std::size_t c = 0; c < classes; ++c) rec.classes.push_back(static_cast<int>(c));
  rec.feature_dim = bc.feature_dim();
  rec.set_params(init_classifier(bc, rec.eft, classes, true, seed));
  return rec;
}

// ---------------------------------------------------------------------------
// 1. DC oracle equivalence

double brute_dcor(const TensorD& x, const TensorD& y) {
  const std::size_t n = x.dim(0), dx = x.dim(1), dy = y.dim(1);
  std::vector<double> a(n * n), b(n * n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) {
      double sa = 0, sb = 0;
      for (std::size_t c = 0; c < dx; ++c) sa += std::pow(x[k * dx + c] - x[l * dx + c], 2);
      for (std::size_t c = 0; c < dy; ++c) sb += std::pow(y[k * dy + c] - y[l * dy + c], 2);
      a[k * n + l] = std::sqrt(sa);
      b[k * n + l] = std::sqrt(sb);
    }
  auto center = [n](std::vector<double>& m) {
    std::vector<double> row(n, 0), col(n, 0);
    double all = 0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) {
        row[k] += m[k * n + l] / n;
        col[l] += m[k * n + l] / n;
        all += m[k * n + l] / (n * n);
      }
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) m[k * n + l] += all - row[k] - col[l];
  };
  center(a);
  center(b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n * n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0, self = 0, invariance = 0;
  bool in_range = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 7, dx = 1 + rng() % 5;
    std::size_t dy = 1 + rng() % 5;
    if (dy == dx) dy = dx + 1;
    const TensorD x = random_tensor({n, dx}, rng), y = random_tensor({n, dy}, rng);
    const double v = dcor(x, y).value;
    worst = std::max(worst, std::abs(v - brute_dcor(x, y)));
    in_range = in_range && v >= 0 && v <= 1;
    self = std::max(self, std::abs(dcor(x, x).value - 1.0));

    // Translation, rotation in the first two coordinates, positive scaling.
    TensorD moved = x;
    const double th = uniform01(rng) * 6.28, s = 0.1 + 5 * uniform01(rng);
    for (std::size_t r = 0; r < n; ++r) {
      if (dx >= 2) {
        const double u = x[r * dx], w = x[r * dx + 1];
        moved[r * dx] = std::cos(th) * u - std::sin(th) * w;
        moved[r * dx + 1] = std::sin(th) * u + std::cos(th) * w;
      }
      for (std::size_t c = 0; c < dx; ++c) moved[r * dx + c] = s * moved[r * dx + c] + 3.0 * static_cast<double>(c) - 1.0;
    }
    invariance = std::max(invariance, std::abs(dcor(moved, y).value - v));
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-9 && self < 1e-9 && in_range && invariance < 1e-6 && secs < 5;
  return {pass, "50 instances: max |dcor - oracle| " + fmt("%.2e", worst) + ", max |dcor(X,X) - 1| " + fmt("%.2e", self) +
                    ", in [0,1] " + (in_range ? "yes" : "no") + ", invariance drift " + fmt("%.2e", invariance)};
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

template <class Build>
double grad_error(const TensorD& x0, Build build) {
  return testutil::grad_check(x0, build, 1e-6);
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  std::map<std::string, double> err;
  auto sq = [](Var<double> y) { return sum(mul(y, y)); };

  {
    const EftConfig cfg{2, 2, 1};
    const TensorD f = random_tensor({2, 4, 4, 4}, rng), gw = random_tensor({3, 3, 2, 4}, rng),
                  pw = random_tensor({1, 1, 2, 4}, rng);
    err["eft_forward"] = std::max(
        {grad_error(f, [&](Graph<double>& g, Var<double> v) { return sq(eft_forward(v, g.constant(gw), g.constant(pw), cfg)); }),
         grad_error(gw, [&](Graph<double>& g, Var<double> v) { return sq(eft_forward(g.constant(f), v, g.constant(pw), cfg)); }),
         grad_error(pw, [&](Graph<double>& g, Var<double> v) { return sq(eft_forward(g.constant(f), g.constant(gw), v, cfg)); })});
  }
  {
    const TensorD x = random_tensor({6, 3}, rng), y = random_tensor({6, 5}, rng);
    err["dcor"] = std::max(grad_error(x, [&](Graph<double>& g, Var<double> v) { return dcor(v, g.constant(y)).value; }),
                           grad_error(y, [&](Graph<double>& g, Var<double> v) { return dcor(g.constant(x), v).value; }));
  }
  {
    const TensorD logits = random_tensor({3, 3}, rng, 0.7);
    const TensorD tn = random_tensor({3, 3, 2, 4}, rng), s1 = random_tensor({3, 3, 2, 4}, rng),
                  s2 = random_tensor({3, 3, 2, 4}, rng);
    err["mix_params logits"] = grad_error(logits, [&](Graph<double>& g, Var<double> v) {
      std::vector<Var<double>> src{g.constant(s1), g.constant(s2)};
      return sq(mix_params(select_row(softmax(v), 1), g.constant(tn), std::span<const Var<double>>(src)));
    });
    const TensorD ft = random_tensor({4, 5}, rng), f1 = random_tensor({4, 5}, rng), f2 = random_tensor({4, 5}, rng);
    err["mix_features logits"] = grad_error(logits, [&](Graph<double>& g, Var<double> v) {
      std::vector<Var<double>> src{g.constant(f1), g.constant(f2)};
      return sq(mix_features(select_row(softmax(v), 2), g.constant(ft), std::span<const Var<double>>(src)));
    });
  }
  {
    // Micro mixed model: J = 2 adapted layers, m = 1 source, batch of 4.
    const BackboneConfig bc = testutil::micro_backbone();
    const Backbone bb = make_backbone(bc);
    const TaskSpec task = testutil::halves_task(10, bc.image_size, 3);
    std::vector<SourceModelRecord> sources{random_record(bc, 0, 2, 9)};
    FeatureCache cache(bb, task);
    TrainConfig cfg;
    cfg.random_new_init = true;
    cfg.seed = 4;
    MixedModel model = build_mixed_model(bb, task, sources, cache, EftConfig{2, 1, 1}, cfg);
    model.trainable["mix.logits"] = random_tensor<float>({3, 2}, rng, 0.5);
    model.trainable["head.weight"] = random_tensor<float>({bc.feature_dim(), 2}, rng, 0.5);
    const std::vector<std::size_t> rows(task.train.begin(), task.train.begin() + 4);
    const MixedBatch<float> bf = mixed_batch(model, task, rows);
    MixedBatch<double> batch{bf.images.cast<double>(), bf.labels, {}, {}};
    for (const auto& f : bf.source_features) batch.source_features.push_back(f.cast<double>());
    for (const auto& f : bf.dc_features) batch.dc_features.push_back(f.cast<double>());
    const BasicBackbone<double> bbd = bb.cast<double>();
    std::vector<std::vector<BasicEftLayer<double>>> modules(1);
    for (const auto& l : model.source_modules[0]) modules[0].push_back(l.cast<double>());
    std::map<std::string, TensorD> params;
    for (const auto& [name, t] : model.trainable) params.emplace(name, t.cast<double>());
    auto total = [&](const std::map<std::string, TensorD>& p, std::map<std::string, TensorD>* grads) {
      Graph<double> g;
      auto vars = bind_params<double>(g, p);
      auto loss = mixed_loss<double>(g, bbd, model.eft, model.mode, vars, modules, batch, 0.05);
      if (grads) *grads = g.backward(loss.total);
      return loss.total.value().item();
    };
    std::map<std::string, TensorD> analytic;
    total(params, &analytic);
    double worst = 0;
    for (const auto& [name, value] : params) {
      const TensorD numeric = finite_diff_grad<double>(
          [&, n = name](const TensorD& v) {
            auto p = params;
            p[n] = v;
            return total(p, nullptr);
          },
          value, 1e-6);
      worst = std::max(worst, max_rel_err(analytic.at(name), numeric));
    }
    err["L_total micro model"] = worst;
  }
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string detail = "max relative error:";
  for (const auto& [name, e] : err) {
    worst = std::max(worst, e);
    detail += " " + name + " " + fmt("%.1e", e) + ";";
  }
  return {worst < 1e-4 && secs < 30, detail};
}

// ---------------------------------------------------------------------------
// 3. Simplex invariant over a 50-epoch run

Outcome criterion3() {
  Desk& d = desk();
  const TaskSpec target = draw_subset(target_task(d, 0), 80, 0, false);
  FeatureCache cache(d.backbone, target);
  TrainConfig cfg = desk_target_config();
  cfg.epochs = 50;
  cfg.lr = 3e-2;  // larger steps push lambda harder
  cfg.seed = 3;
  const SelectionReport rep = select_top_m(d.pool, d.backbone, target, SelectionConfig{5, 2}, &cache);
  std::vector<SourceModelRecord> chosen;
  for (int id : rep.selected) chosen.push_back(d.pool[static_cast<std::size_t>(id)]);
  MixedModel model = build_mixed_model(d.backbone, target, chosen, cache, EftConfig::desk(), cfg);

  long steps = 0, violations = 0;
  double worst_sum = 0, min_entry = 1;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s) {
    const Tensor& logits = s.params.at("mix.logits");
    const std::size_t cols = logits.dim(1);
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
      double mx = -INFINITY, z = 0;
      for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(logits[r * cols + c]));
      std::vector<double> w(cols);
      for (std::size_t c = 0; c < cols; ++c) z += w[c] = std::exp(logits[r * cols + c] - mx);
      double total = 0;
      for (double& v : w) {
        v /= z;
        total += v;
        min_entry = std::min(min_entry, v);
        violations += v > 0 ? 0 : 1;
      }
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
    ++steps;
  };
  const MixedRun run = train_mixed(model, d.backbone, target, cfg, hooks);
  double drift = 0;
  for (const auto& e : run.history)
    for (std::size_t r = 0; r < e.lambda.size(); ++r)
      drift = std::max(drift, std::abs(e.lambda[r].back() - run.history.front().lambda[r].back()));
  const bool pass = steps > 0 && run.history.size() == 50 && worst_sum <= 1e-6 && violations == 0 && min_entry > 0;
  return {pass, std::to_string(steps) + " steps over " + std::to_string(run.history.size()) +
                    " epochs (m=2): max |row sum - 1| " + fmt("%.1e", worst_sum) + ", min weight " + fmt("%.3e", min_entry) +
                    ", lambda_new moved by up to " + fmt("%.3f", drift)};
}

// ---------------------------------------------------------------------------
// 4. Frozen-weight contracts

Outcome criterion4() {
  Desk& d = desk();
  testutil::TempDir dir("recycle-acceptance-frozen");
  Pool pool = Pool::create(dir.path, d.backbone);
  for (const auto& rec : d.pool) pool.append(rec);

  auto file_hashes = [&] {
    std::map<std::string, std::uint64_t> h;
    for (const auto& e : fs::directory_iterator(dir.path))
      if (e.path().extension() == ".bin") h[e.path().filename().string()] = file_hash(e.path());
    return h;
  };
  auto memory_hashes = [](const Backbone& bb, const std::vector<SourceModelRecord>& recs) {
    std::vector<std::uint64_t> h{backbone_hash(bb)};
    for (const auto& r : recs)
      for (const auto& [n, t] : r.params()) h.push_back(tensor_hash(t));
    return h;
  };

  const auto files_before = file_hashes();
  const Pool opened = Pool::open(dir.path);
  const Backbone& bb = opened.backbone();
  const TaskSpec target = draw_subset(target_task(d, 1), 40, 1, false);
  FeatureCache cache(bb, target);
  const SelectionReport rep = select_top_m(opened.load_all(), bb, target, SelectionConfig{5, 2}, &cache);
  std::vector<SourceModelRecord> chosen;
  for (int id : rep.selected) chosen.push_back(opened.load(id));
  const auto mem_before = memory_hashes(bb, chosen);

  TrainConfig cfg = desk_target_config();
  cfg.epochs = 5;
  std::vector<std::string> runs;
  train_mixed(build_mixed_model(bb, target, chosen, cache, EftConfig::desk(), cfg), bb, target, cfg);
  runs.push_back("white-box mix");
  train_mixed(build_mixed_model(bb, target, chosen, cache, EftConfig::desk(), cfg, MixMode::FeaturesOnly), bb, target, cfg);
  runs.push_back("feature mix");
  train_independent(target, bb, EftConfig::desk(), cfg);
  runs.push_back("independent");
  finetune_source(chosen[0], target, bb, cfg);
  runs.push_back("finetune");
  {
    std::vector<PoolModelApi> apis;
    for (const auto& r : chosen) apis.emplace_back(r, bb);
    std::vector<const FeatureApi*> handles;
    for (const auto& a : apis) handles.push_back(&a);
    const Backbone narrow = make_backbone(BackboneConfig::narrow());
    const TaskSpec full = target_task(d, 1);
    BlackboxModel bbm = build_blackbox_model(handles, narrow, EftConfig::desk(), full, cfg);
    train_mixed(std::move(bbm.model), narrow, full, cfg);
    runs.push_back("black-box mix");
  }
  const bool files_same = file_hashes() == files_before;
  const bool mem_same = memory_hashes(bb, chosen) == mem_before;
  std::string list;
  for (const auto& r : runs) list += (list.empty() ? "" : ", ") + r;
  return {files_same && mem_same, std::to_string(files_before.size()) + " blob files and " +
                                      std::to_string(mem_before.size()) + " in-memory tensors unchanged after " + list +
                                      ": files " + (files_same ? "identical" : "CHANGED") + ", memory " +
                                      (mem_same ? "identical" : "CHANGED")};
}

// ---------------------------------------------------------------------------
// 5. EFT parameter accounting

Outcome criterion5() {
  std::mt19937_64 rng(505);
  int agree = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t a = std::size_t{1} << (rng() % 4), b = std::size_t{1} << (rng() % 4);
    BackboneConfig bc;
    bc.channels.clear();
    bc.pool_after.clear();
    const std::size_t layers = 1 + rng() % 5;
    for (std::size_t j = 0; j < layers; ++j) {
      bc.channels.push_back(8 * (1 + rng() % 8));
      bc.pool_after.push_back(false);
    }
    const EftConfig cfg{a, b, 1};
    std::size_t allocated = 0;
    for (const auto& l : init_adapters(bc, cfg, trial % 2 == 1, rng)) allocated += l.groupwise.size() + l.pointwise.size();
    agree += param_count(bc.channels, cfg) == allocated ? 1 : 0;
  }
  // Assumed layer set: all 20 ResNet-18 convs (stem, 16 block convs, 3 shortcut convs), each adapter
  // carrying a per-channel bias on both banks and an affine normalization after each bank.
  const std::size_t total = adapter_param_count(resnet18_channel_schedule(true), EftConfig::large(), AdapterOverheads{true, 2});
  const double rel = std::abs(static_cast<double>(total) - 449000.0) / 449000.0;
  return {agree == 20 && rel < 0.02, std::to_string(agree) + "/20 random configs match the allocated tensors; ResNet-18 a=8 b=16 -> " +
                                         std::to_string(total) + " (" + fmt("%+.2f", 100.0 * (static_cast<double>(total) - 449000.0) / 449000.0) +
                                         "% vs 449,000)"};
}

// ---------------------------------------------------------------------------
// 6. k-NN oracle equivalence

Outcome criterion6() {
  std::mt19937_64 rng(606);
  int agree = 0, with_ties = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 50, d = 1 + rng() % 4, k = 1 + rng() % std::min<std::size_t>(7, n);
    const bool grid = trial % 2 == 0;  // small integer grids produce distance and vote ties
    FeatureDataset train;
    train.features = Tensor(Shape{n, d});
    for (auto& v : train.features.data()) v = grid ? static_cast<float>(rng() % 3) : static_cast<float>(gaussian(rng));
    for (std::size_t i = 0; i < n; ++i) train.labels.push_back(static_cast<int>(rng() % 4));
    std::vector<float> q(d);
    for (auto& v : q) v = grid ? static_cast<float>(rng() % 3) : static_cast<float>(gaussian(rng));

    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += std::pow(static_cast<double>(train.features[i * d + c]) - q[c], 2);
      all.emplace_back(std::sqrt(s), i);
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> idx;
    std::map<int, int> votes;
    for (std::size_t i = 0; i < k; ++i) {
      idx.push_back(all[i].second);
      ++votes[train.labels[all[i].second]];
    }
    int label = -1, best = -1, top_count = 0;
    for (const auto& [l, v] : votes)
      if (v > best) label = l, best = v;
    for (const auto& [l, v] : votes) top_count += v == best ? 1 : 0;
    const bool tied = top_count > 1 || (k < n && all[k - 1].first == all[k].first);
    with_ties += tied ? 1 : 0;
    agree += (knn_neighbors(train, q, k) == idx && knn_predict(train, q, k) == label) ? 1 : 0;
  }
  return {agree == 100, std::to_string(agree) + "/100 instances agree on neighbours and label (" + std::to_string(with_ties) +
                            " with distance or vote ties)"};
}

// ---------------------------------------------------------------------------
// 7. Selection fidelity

Outcome criterion7() {
  const auto t0 = Clock::now();
  Desk& d = desk();
  int same = 0;
  std::string misses;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const TaskSpec& target = target_task(d, seed);
    const SelectionReport rep = select_top_m(d.pool, d.backbone, target, SelectionConfig{5, 1});
    const auto& pick = d.pool[static_cast<std::size_t>(rep.selected[0])];
    if (pick.family == target.family)
      ++same;
    else
      misses += " " + target.id + "->" + pick.task_id;
  }
  const double secs = seconds_since(t0);
  return {same >= 18 && secs < 180, std::to_string(same) + "/20 targets pick a same-family source (pool of " +
                                        std::to_string(d.pool.size()) + ", pool training included in time)" +
                                        (misses.empty() ? "" : "; misses:" + misses)};
}

// ---------------------------------------------------------------------------
// 8. Transfer gain at e = 20

Outcome criterion8() {
  const auto t0 = Clock::now();
  Desk& d = desk();
  double ind = 0, mix_knn = 0, mix_rand = 0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const TaskSpec target = draw_subset(target_task(d, seed), 20, static_cast<std::uint64_t>(seed), false);
    TrainConfig cfg = desk_target_config();
    cfg.seed = static_cast<std::uint64_t>(seed);
    FeatureCache cache(d.backbone, target);
    const SelectionReport rep = select_top_m(d.pool, d.backbone, target, SelectionConfig{5, 1}, &cache);
    std::mt19937_64 rng(derive_seed(static_cast<std::uint64_t>(seed), 99));
    const std::size_t random_id = static_cast<std::size_t>(rng() % d.pool.size());
    const std::vector<SourceModelRecord> knn{d.pool[static_cast<std::size_t>(rep.selected[0])]}, rnd{d.pool[random_id]};
    ind += train_independent(target, d.backbone, EftConfig::desk(), cfg).test_accuracy / kSeeds;
    mix_knn += train_mixed(build_mixed_model(d.backbone, target, knn, cache, EftConfig::desk(), cfg), d.backbone, target, cfg)
                   .test_accuracy / kSeeds;
    mix_rand += train_mixed(build_mixed_model(d.backbone, target, rnd, cache, EftConfig::desk(), cfg), d.backbone, target, cfg)
                    .test_accuracy / kSeeds;
  }
  const double secs = seconds_since(t0);
  const bool pass = mix_knn >= ind + 0.02 && mix_knn >= mix_rand && secs + d.build_seconds < 600;
  return {pass, "mean test accuracy over 20 seeds: independent " + fmt("%.4f", ind) + ", mix k-NN " + fmt("%.4f", mix_knn) +
                    " (" + fmt("%+.1f", 100 * (mix_knn - ind)) + " points), mix random " + fmt("%.4f", mix_rand)};
}

// ---------------------------------------------------------------------------
// 9. Non-zero mixing prevalence

Outcome criterion9() {
  Desk& d = desk();
  int interior = 0;
  std::vector<int> best_cells;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const TaskSpec target = draw_subset(target_task(d, seed), 80, static_cast<std::uint64_t>(seed), false);
    TrainConfig cfg = desk_target_config();
    cfg.epochs = 20;
    cfg.seed = static_cast<std::uint64_t>(seed);
    FeatureCache cache(d.backbone, target);
    const SelectionReport rep = select_top_m(d.pool, d.backbone, target, SelectionConfig{5, 1}, &cache);
    const std::vector<SourceModelRecord> src{d.pool[static_cast<std::size_t>(rep.selected[0])]};
    int best = -1;
    double best_acc = -1, best_ce = INFINITY;
    for (int c = 0; c <= 10; ++c) {
      const double lambda_source = c / 10.0;
      MixedModel model = build_mixed_model(d.backbone, target, src, cache, EftConfig::desk(), cfg, MixMode::FeaturesOnly);
      model.trainable["mix.logits"] = fixed_mixing(1.0 - lambda_source, 1, model.layers).logits;
      model.freeze_lambda = true;
      const MixedRun run = train_mixed(std::move(model), d.backbone, target, cfg);
      if (run.test_accuracy > best_acc || (run.test_accuracy == best_acc && run.test_ce < best_ce)) {
        best = c;
        best_acc = run.test_accuracy;
        best_ce = run.test_ce;
      }
    }
    best_cells.push_back(best);
    interior += best > 0 && best < 10 ? 1 : 0;
  }
  std::string cells;
  for (int b : best_cells) cells += " " + fmt("%.1f", b / 10.0);
  return {interior >= 12, std::to_string(interior) + "/20 targets have a strictly interior best lambda_source (e=80); best cells:" + cells};
}

// ---------------------------------------------------------------------------
// 10. FastICA and the black-box path

Outcome criterion10() {
  std::mt19937_64 rng(1010);
  // Whitening.
  TensorD x = random_tensor({4000, 6}, rng);
  for (std::size_t i = 0; i < 4000; ++i) {
    x[i * 6 + 1] += 0.9 * x[i * 6];
    x[i * 6 + 4] = 3 * x[i * 6 + 4] - x[i * 6 + 2];
  }
  const IcaTransformer white = fastica_fit(x, 6, IcaOptions{300, 1e-6, 1});
  const TensorD y = fastica_transform(white, x);
  double dev = 0;  // infinity norm: largest absolute row sum of cov - I
  for (std::size_t a = 0; a < 6; ++a) {
    double row = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      double ma = 0, mb = 0, c = 0;
      for (std::size_t i = 0; i < 4000; ++i) {
        ma += y[i * 6 + a] / 4000;
        mb += y[i * 6 + b] / 4000;
      }
      for (std::size_t i = 0; i < 4000; ++i) c += (y[i * 6 + a] - ma) * (y[i * 6 + b] - mb) / 4000;
      row += std::abs(c - (a == b ? 1.0 : 0.0));
    }
    dev = std::max(dev, row);
  }

  // Two-source recovery on n = 2000.
  const std::size_t n = 2000;
  std::vector<double> s1(n), s2(n);
  TensorD mixed(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    s1[i] = 2 * uniform01(rng) - 1;
    s2[i] = std::pow(2 * uniform01(rng) - 1, 3);
    mixed[i * 2] = 0.8 * s1[i] + 0.5 * s2[i];
    mixed[i * 2 + 1] = -0.3 * s1[i] + 1.1 * s2[i];
  }
  const TensorD rec = fastica_transform(fastica_fit(mixed, 2, IcaOptions{500, 1e-6, 2}), mixed);
  auto corr = [&](std::size_t col, const std::vector<double>& s) {
    double my = 0, ms = 0, syy = 0, sss = 0, sys = 0;
    for (std::size_t i = 0; i < n; ++i) {
      my += rec[i * 2 + col] / n;
      ms += s[i] / n;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double a = rec[i * 2 + col] - my, b = s[i] - ms;
      syy += a * a;
      sss += b * b;
      sys += a * b;
    }
    return std::abs(sys / std::sqrt(syy * sss));
  };
  const double recovery = std::max(std::min(corr(0, s1), corr(1, s2)), std::min(corr(0, s2), corr(1, s1)));

  // Black-box run: a 64-wide source model served through the feature API, a 16-wide target.
  FamilySuiteDims dims;
  const auto suite = gen_family_suite(1, 2, dims, 31);
  const Backbone wide = make_backbone(BackboneConfig::wide());
  const Backbone narrow = make_backbone(BackboneConfig::narrow());
  TrainConfig sc = desk_source_config();
  sc.epochs = 5;
  SourceModelRecord source = train_source(suite[0], wide, EftConfig::desk(), sc);
  source.id = 0;
  const PoolModelApi api(source, wide);
  const FeatureApi* handles[] = {&api};
  TrainConfig tc = desk_target_config();
  tc.epochs = 10;
  tc.sigma = 0.05;
  const TaskSpec& target = suite[1];
  BlackboxModel bbm = build_blackbox_model(handles, narrow, EftConfig::desk(), target, tc);
  const MixedRun with_dc = train_mixed(bbm.model, narrow, target, tc);
  bool both = !with_dc.history.empty();
  for (const auto& e : with_dc.history) both = both && e.ce > 0 && e.dc > 0;
  tc.sigma = 0;
  const MixedRun without = train_mixed(bbm.model, narrow, target, tc);
  bool no_dc = true;
  for (const auto& e : without.history) no_dc = no_dc && e.dc == 0;
  const bool shapes = bbm.ica[0].d_in == 64 && bbm.ica[0].n_components == 16;

  const bool pass = dev < 1e-3 && recovery >= 0.95 && both && no_dc && shapes;
  return {pass, "whitened covariance |cov - I|_inf " + fmt("%.1e", dev) + "; recovery correlation " + fmt("%.4f", recovery) +
                    "; black-box 64->16 run: final CE " + fmt("%.4f", with_dc.history.back().ce) + ", DC " +
                    fmt("%.4f", with_dc.history.back().dc) + ", test acc " + fmt("%.3f", with_dc.test_accuracy) +
                    " (without DC " + fmt("%.3f", without.test_accuracy) + ")"};
}

// ---------------------------------------------------------------------------
// 11. Determinism of full CLI runs

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome criterion11() {
  testutil::TempDir dir("recycle-acceptance-cli");
  const std::string cli = RECYCLE_CLI, d = dir.path.string();
  if (shell(cli + " gen-tasks --suite family --families 2 --tasks-per-family 3 --train-per-class 20 --seed 4 --out " + d +
            "/suite") != 0)
    return {false, "gen-tasks failed"};
  const std::string run = cli + " run --tasks " + d + "/suite --m 0,1,2 --e 20 --seeds 2 --initial-pool 3 --finetune --out ";
  if (shell(run + d + "/a") != 0 || shell(run + d + "/b") != 0) return {false, "run failed"};
  const std::string black = cli + " run --tasks " + d + "/suite --protocol black --m 1 --e 40 --initial-pool 3 --out ";
  if (shell(black + d + "/c") != 0 || shell(black + d + "/e") != 0) return {false, "black-box run failed"};
  int identical = 0, files = 0;
  for (const auto& [x, y] : {std::pair{"a", "b"}, std::pair{"c", "e"}})
    for (const char* f : {"report.csv", "summary.json", "run.json"}) {
      ++files;
      identical += read_file(dir.path / x / f) == read_file(dir.path / y / f) ? 1 : 0;
    }
  const std::string csv = read_file(dir.path / "a" / "report.csv");
  const long rows = static_cast<long>(std::count(csv.begin(), csv.end(), '\n')) - 1;
  return {identical == files && rows > 0, std::to_string(identical) + "/" + std::to_string(files) +
                                              " report files byte-identical across repeated white- and black-box runs (" +
                                              std::to_string(rows) + " white-box rows)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4,
                                                       criterion5, criterion6, criterion7, criterion8,
                                                       criterion9, criterion10, criterion11};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  // Criterion 7 times the pool build, so it runs first whenever it is requested.
  std::vector<int> order{7, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11};
  for (int n : order) {
    if (!wanted.empty() && !wanted.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(n - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d %s %s (%.1f s)\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}

#include "recycle/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

namespace recycle {

TrainConfig desk_source_config() {
  TrainConfig c;
  c.lr = 1e-2;
  c.epochs = 15;
  c.batch_size = 32;
  return c;
}

TrainConfig desk_target_config() {
  TrainConfig c;
  c.lr = 1e-2;
  c.epochs = 40;
  c.batch_size = 32;
  return c;
}

// ---------------------------------------------------------------------------

GridResult grid_search(const TaskSpec& task, const Backbone& backbone, std::span<const SourceModelRecord> sources,
                       const EftConfig& eft, const TrainConfig& base, MixMode mode) {
  base.validate(true);
  require(!task.val.empty(), "grid_search: the task needs a validation split");
  FeatureCache cache(backbone, task);
  GridResult out;
  for (double lr : base.grid_lr)
    for (double wd : base.grid_weight_decay)
      for (double lam : base.grid_lambda_new) {
        GridCell cell{lr, wd, lam, false, {}, 0, 0};
        TrainConfig cfg = base;
        cfg.lr = lr;
        cfg.weight_decay = wd;
        cfg.lambda_new = lam;
        try {
          MixedRun run = train_mixed(build_mixed_model(backbone, task, sources, cache, eft, cfg, mode), backbone, task, cfg);
          cell.ok = true;
          cell.val_accuracy = run.val_accuracy;
          cell.test_accuracy = run.test_accuracy;
          if (!out.best || cell.val_accuracy > out.cells[*out.best].val_accuracy) {
            out.best = out.cells.size();
            out.best_config = cfg;
          }
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
        out.cells.push_back(std::move(cell));
      }
  return out;
}

void to_json(nlohmann::json& j, const GridResult& g) {
  j = nlohmann::json::object();
  auto& cells = j["cells"] = nlohmann::json::array();
  for (const auto& c : g.cells) {
    nlohmann::json row = {{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"lambda_new", c.lambda_new}, {"ok", c.ok}};
    if (c.ok) {
      row["val_accuracy"] = c.val_accuracy;
      row["test_accuracy"] = c.test_accuracy;
    } else {
      row["error"] = c.error;
    }
    cells.push_back(std::move(row));
  }
  j["best"] = g.best ? nlohmann::json(*g.best) : nlohmann::json(nullptr);
  if (g.best) j["best_config"] = g.best_config;
}

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  require(!m_values.empty() && !e_values.empty(), "experiment: m and e lists must be non-empty");
  require(seeds >= 1, "experiment: need at least one seed");
  require(initial_pool >= 1, "experiment: the initial pool needs at least one task");
  require(k >= 1, "experiment: k must be at least 1");
  for (std::size_t e : e_values) require(e >= 1, "experiment: e must be positive");
  source.validate();
  target.validate();
  eft.validate();
  backbone.validate();
  target_backbone.validate();
}

namespace {

std::string protocol_name(Protocol p) { return p == Protocol::White ? "white" : "black"; }

nlohmann::json eft_json(const EftConfig& e) { return {{"a", e.a}, {"b", e.b}, {"gamma", e.gamma}}; }

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

ReportRow failed_row(const std::string& task, const std::string& method, std::size_t m, std::size_t e,
                     std::size_t seed, const std::exception& err) {
  ReportRow r;
  r.task = task;
  r.method = method;
  r.m = m;
  r.e = e;
  r.seed = seed;
  r.status = std::string("error: ") + err.what();
  return r;
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"protocol", protocol_name(c.protocol)},
       {"m_values", c.m_values},
       {"e_values", c.e_values},
       {"seeds", c.seeds},
       {"initial_pool", c.initial_pool},
       {"k", c.k},
       {"finetune", c.finetune},
       {"source", c.source},
       {"target", c.target},
       {"eft", eft_json(c.eft)},
       {"backbone", c.backbone},
       {"target_backbone", c.target_backbone}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const std::string protocol = j.value("protocol", std::string("white"));
  require(protocol == "white" || protocol == "black", "experiment: protocol must be white or black");
  c.protocol = protocol == "white" ? Protocol::White : Protocol::Black;
  c.m_values = j.value("m_values", c.m_values);
  c.e_values = j.value("e_values", c.e_values);
  c.seeds = j.value("seeds", c.seeds);
  c.initial_pool = j.value("initial_pool", c.initial_pool);
  c.k = j.value("k", c.k);
  c.finetune = j.value("finetune", c.finetune);
  if (j.contains("source")) c.source = j.at("source").get<TrainConfig>();
  if (j.contains("target")) c.target = j.at("target").get<TrainConfig>();
  if (j.contains("eft"))
    c.eft = EftConfig{j.at("eft").at("a").get<std::size_t>(), j.at("eft").at("b").get<std::size_t>(),
                      j.at("eft").at("gamma").get<int>()};
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  if (j.contains("target_backbone")) c.target_backbone = j.at("target_backbone").get<BackboneConfig>();
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const ReportRow& r) {
  j = {{"task", r.task},     {"method", r.method},   {"m", r.m},
       {"e", r.e},           {"seed", r.seed},       {"status", r.status},
       {"val_acc", r.val_acc}, {"test_acc", r.test_acc}, {"lambda_digest", r.lambda_digest},
       {"selected", r.selected}};
}

ReportRow report_row_from_json(const nlohmann::json& j) {
  ReportRow r;
  r.task = j.at("task").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.m = j.at("m").get<std::size_t>();
  r.e = j.at("e").get<std::size_t>();
  r.seed = j.at("seed").get<std::size_t>();
  r.status = j.value("status", std::string("ok"));
  r.val_acc = j.at("val_acc").get<double>();
  r.test_acc = j.at("test_acc").get<double>();
  r.lambda_digest = j.value("lambda_digest", std::string());
  r.selected = j.value("selected", std::vector<int>{});
  return r;
}

std::string lambda_digest(const std::vector<EpochRecord>& history) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& rec : history)
    for (const auto& row : rec.lambda) h = hash_bytes(std::as_bytes(std::span<const double>(row)), h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ReportRow> run_experiment(const std::vector<TaskSpec>& suite, const ExperimentConfig& cfg,
                                      const std::filesystem::path& pool_dir, bool force) {
  cfg.validate();
  require(suite.size() > cfg.initial_pool, "experiment: the suite must hold more tasks than the initial pool");
  Pool pool = Pool::create(pool_dir, make_backbone(cfg.backbone), force);
  const Backbone& backbone = pool.backbone();
  const Backbone target_backbone = cfg.protocol == Protocol::Black ? make_backbone(cfg.target_backbone) : backbone;
  std::vector<ReportRow> rows;

  auto append_task = [&](std::size_t i) {
    TrainConfig sc = cfg.source;
    sc.seed = derive_seed(cfg.source.seed, 0x5005ULL, i);
    try {
      pool.append(train_source(suite[i], backbone, cfg.eft, sc));
    } catch (const std::exception& err) {
      rows.push_back(failed_row(suite[i].id, "append", 0, 0, 0, err));
    }
  };

  for (std::size_t i = 0; i < cfg.initial_pool; ++i) append_task(i);

  for (std::size_t i = cfg.initial_pool; i < suite.size(); ++i) {
    const TaskSpec& task = suite[i];
    const std::vector<SourceModelRecord> sources = pool.load_all();
    for (std::size_t e : cfg.e_values)
      for (std::size_t s = 0; s < cfg.seeds; ++s) {
        TaskSpec target;
        try {
          target = draw_subset(task, e, derive_seed(cfg.target.seed, 0x7a76ULL, s), task.val.empty());
        } catch (const std::exception& err) {
          for (std::size_t m : cfg.m_values) rows.push_back(failed_row(task.id, m == 0 ? "independent" : "mix", m, e, s, err));
          continue;
        }
        TrainConfig tc = cfg.target;
        tc.seed = derive_seed(cfg.target.seed, i, e, s);
        FeatureCache cache(backbone, target);

        for (std::size_t m : cfg.m_values) {
          ReportRow row;
          row.task = task.id;
          row.method = m == 0 ? "independent" : "mix";
          row.m = m;
          row.e = e;
          row.seed = s;
          try {
            if (m == 0) {
              const ClassifierRun run = train_independent(target, target_backbone, cfg.eft, tc);
              row.val_acc = run.val_accuracy;
              row.test_acc = run.test_accuracy;
            } else {
              const SelectionReport rep = select_top_m(sources, backbone, target, SelectionConfig{cfg.k, m}, &cache);
              std::vector<SourceModelRecord> chosen;
              for (int id : rep.selected) chosen.push_back(pool.load(id));
              row.selected = rep.selected;
              MixedRun run;
              if (cfg.protocol == Protocol::White) {
                run = train_mixed(build_mixed_model(backbone, target, chosen, cache, cfg.eft, tc), backbone, target, tc);
              } else {
                std::vector<PoolModelApi> apis;
                for (auto& rec : chosen) apis.emplace_back(rec, backbone);
                std::vector<const FeatureApi*> handles;
                for (const auto& api : apis) handles.push_back(&api);
                BlackboxModel bbm = build_blackbox_model(handles, target_backbone, cfg.eft, target, tc);
                run = train_mixed(std::move(bbm.model), target_backbone, target, tc);
              }
              row.val_acc = run.val_accuracy;
              row.test_acc = run.test_accuracy;
              row.lambda_digest = lambda_digest(run.history);
            }
          } catch (const std::exception& err) {
            row.status = std::string("error: ") + err.what();
          }
          rows.push_back(std::move(row));
        }

        if (cfg.finetune && cfg.protocol == Protocol::White) {
          ReportRow row;
          row.task = task.id;
          row.method = "finetune";
          row.m = 1;
          row.e = e;
          row.seed = s;
          try {
            const SelectionReport rep = select_top_m(sources, backbone, target, SelectionConfig{cfg.k, 1}, &cache);
            row.selected = rep.selected;
            const ClassifierRun run = finetune_source(pool.load(rep.selected[0]), target, backbone, tc);
            row.val_acc = run.val_accuracy;
            row.test_acc = run.test_accuracy;
          } catch (const std::exception& err) {
            row.status = std::string("error: ") + err.what();
          }
          rows.push_back(std::move(row));
        }
      }
    append_task(i);
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "task,method,m,e,seed,val_acc,test_acc,lambda_digest,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    for (auto& ch : status)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    os << r.task << ',' << r.method << ',' << r.m << ',' << r.e << ',' << r.seed << ',' << fmt6(r.val_acc) << ','
       << fmt6(r.test_acc) << ',' << r.lambda_digest << ',' << status << '\n';
  }
  return os.str();
}

nlohmann::json report_summary(const std::vector<ReportRow>& rows) {
  struct Acc {
    std::vector<double> val, test;
  };
  std::map<std::tuple<std::string, std::size_t, std::size_t>, Acc> groups;
  std::size_t ok = 0;
  double val_sum = 0, test_sum = 0;
  for (const auto& r : rows) {
    if (r.status != "ok") continue;
    ++ok;
    val_sum += r.val_acc;
    test_sum += r.test_acc;
    auto& g = groups[{r.method, r.m, r.e}];
    g.val.push_back(r.val_acc);
    g.test.push_back(r.test_acc);
  }
  auto stats = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
  };
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [key, g] : groups) {
    const auto [vm, vs] = stats(g.val);
    const auto [tm, ts] = stats(g.test);
    cells.push_back({{"method", std::get<0>(key)},
                     {"m", std::get<1>(key)},
                     {"e", std::get<2>(key)},
                     {"count", g.test.size()},
                     {"val_acc_mean", vm},
                     {"val_acc_std", vs},
                     {"test_acc_mean", tm},
                     {"test_acc_std", ts}});
  }
  return {{"cells", cells},
          {"totals",
           {{"rows", rows.size()},
            {"ok_rows", ok},
            {"failed_rows", rows.size() - ok},
            {"val_acc_sum", val_sum},
            {"test_acc_sum", test_sum}}}};
}

}  // namespace recycle

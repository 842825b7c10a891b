// Command-line front end for pool building, selection, mixing and experiment runs.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "recycle/blob_io.hpp"
#include "recycle/experiment.hpp"

namespace fs = std::filesystem;
using namespace recycle;
using nlohmann::json;

namespace {

void refuse_overwrite(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) throw ValidationError(path.string() + " exists (use --force to overwrite)");
}

void write_json(const fs::path& path, const json& j, bool force) {
  refuse_overwrite(path, force);
  write_file_atomic(path, j.dump(2) + "\n");
}

BackboneConfig backbone_preset(const std::string& name) {
  if (name == "desk") return BackboneConfig::desk();
  if (name == "narrow") return BackboneConfig::narrow();
  if (name == "wide") return BackboneConfig::wide();
  throw ValidationError("unknown backbone preset '" + name + "' (desk, narrow, wide)");
}

fs::path resolve_pool(const std::string& flag) {
  if (const char* env = std::getenv("RECYCLE_POOL"); env && *env) return env;
  if (flag.empty()) throw ValidationError("no pool given (--pool or RECYCLE_POOL)");
  return flag;
}

struct TrainFlags {
  double lr = -1, wd = -1;
  int epochs = -1;
  std::size_t batch = 0;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--wd", wd, "weight decay");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--seed", seed, "run seed");
  }
  TrainConfig apply(TrainConfig c) const {
    if (lr >= 0) c.lr = lr;
    if (wd >= 0) c.weight_decay = wd;
    if (epochs >= 0) c.epochs = epochs;
    if (batch > 0) c.batch_size = batch;
    c.seed = seed;
    return c;
  }
};

TaskSpec load_target(const std::string& path, std::size_t e, std::uint64_t seed) {
  TaskSpec task = load_task(path);
  if (e > 0) task = draw_subset(task, e, seed, task.val.empty());
  return ensure_validation(task, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-model pool building, selection and module mixing"};
  app.require_subcommand(1);
  bool force = false;
  app.add_flag("--force", force, "overwrite existing outputs");

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task suite");
  std::string suite_kind = "family", gen_out;
  std::size_t families = 3, tasks_per_family = 4, n_tasks = 8, classes_per_task = 4;
  FamilySuiteDims fdims;
  OverlapSuiteDims odims;
  double noise = fdims.image.pixel_noise, nuisance = fdims.image.nuisance_scale;
  std::uint64_t gen_seed = 0;
  gen->add_option("--suite", suite_kind, "family or overlap")->check(CLI::IsMember({"family", "overlap"}));
  gen->add_option("--families", families, "families (family suite)");
  gen->add_option("--tasks-per-family", tasks_per_family, "tasks per family (family suite)");
  gen->add_option("--classes-per-family", fdims.classes_per_family, "classes per family (family suite)");
  gen->add_option("--n-tasks", n_tasks, "task count (overlap suite)");
  gen->add_option("--classes-per-task", classes_per_task, "classes per task");
  gen->add_option("--train-per-class", fdims.train_per_class, "training samples per class");
  gen->add_option("--val-per-class", fdims.val_per_class, "validation samples per class (family suite)");
  gen->add_option("--test-per-class", fdims.test_per_class, "test samples per class");
  gen->add_option("--noise", noise, "pixel noise std");
  gen->add_option("--nuisance", nuisance, "nuisance grating scale");
  gen->add_option("--seed", gen_seed, "suite seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // build-pool
  auto* build = app.add_subcommand("build-pool", "train source models into a pool");
  std::string build_tasks, build_pool, backbone_name = "desk";
  std::size_t build_first = 0;
  bool build_append = false;
  TrainFlags build_train;
  build->add_option("--tasks", build_tasks, "suite directory")->required();
  build->add_option("--pool", build_pool, "pool directory");
  build->add_option("--first", build_first, "use only the first N tasks");
  build->add_option("--backbone", backbone_name, "desk, narrow or wide");
  build->add_flag("--append", build_append, "append to an existing pool");
  build_train.add(build);

  // select
  auto* sel = app.add_subcommand("select", "rank pool models for a target task by k-NN accuracy");
  std::string sel_pool, sel_task, sel_out;
  SelectionConfig sel_cfg{5, 3, "euclidean"};
  std::size_t sel_e = 0;
  std::uint64_t sel_seed = 0;
  sel->add_option("--pool", sel_pool, "pool directory");
  sel->add_option("--task", sel_task, "target task json")->required();
  sel->add_option("--k", sel_cfg.k, "neighbours");
  sel->add_option("--m", sel_cfg.m, "models to select");
  sel->add_option("--e", sel_e, "draw a training subset of this size");
  sel->add_option("--seed", sel_seed, "subset seed");
  sel->add_option("--out", sel_out, "report path")->required();

  // mix
  auto* mix = app.add_subcommand("mix", "train a module-mixing model on a target task");
  std::string mix_pool, mix_task, mix_out, target_backbone_name = "narrow";
  bool white = false, black = false, features_only = false, freeze = false, random_init = false;
  std::size_t mix_m = 1, mix_k = 5, mix_e = 0;
  double sigma = 0.05, lambda_new = 0.5;
  TrainFlags mix_train;
  auto* w_flag = mix->add_flag("--white", white, "mix adapter weights and features");
  auto* b_flag = mix->add_flag("--black", black, "feature-only mixing through FastICA-reduced APIs");
  w_flag->excludes(b_flag);
  mix->add_option("--pool", mix_pool, "pool directory");
  mix->add_option("--task", mix_task, "target task json")->required();
  mix->add_option("--m", mix_m, "sources to mix");
  mix->add_option("--k", mix_k, "k for selection");
  mix->add_option("--e", mix_e, "training subset size");
  mix->add_option("--sigma", sigma, "DC trade-off");
  mix->add_option("--lambda-new", lambda_new, "initial weight of the new module");
  mix->add_flag("--features-only", features_only, "skip parameter mixing (white-box)");
  mix->add_flag("--freeze-lambda", freeze, "keep the mixing weights fixed");
  mix->add_flag("--random-init", random_init, "small-Gaussian init for new modules");
  mix->add_option("--target-backbone", target_backbone_name, "black-box target model preset");
  mix->add_option("--out", mix_out, "run path")->required();
  mix_train.add(mix);

  // grid
  auto* grid = app.add_subcommand("grid", "grid search over lr, weight decay and lambda_new");
  std::string grid_pool, grid_task, grid_out;
  std::size_t grid_m = 1, grid_k = 5, grid_e = 0;
  std::vector<double> grid_lr, grid_wd, grid_lam;
  TrainFlags grid_train;
  grid->add_option("--pool", grid_pool, "pool directory");
  grid->add_option("--task", grid_task, "target task json")->required();
  grid->add_option("--m", grid_m, "sources to mix");
  grid->add_option("--k", grid_k, "k for selection");
  grid->add_option("--e", grid_e, "training subset size");
  grid->add_option("--lr-list", grid_lr, "learning rates")->delimiter(',');
  grid->add_option("--wd-list", grid_wd, "weight decays")->delimiter(',');
  grid->add_option("--lambda-list", grid_lam, "lambda_new values")->delimiter(',');
  grid->add_option("--out", grid_out, "grid path")->required();
  grid_train.add(grid);

  // run
  auto* run = app.add_subcommand("run", "pool-then-adapt-then-append experiment");
  std::string run_tasks, run_pool, run_out, run_config, protocol = "white";
  ExperimentConfig exp;
  run->add_option("--tasks", run_tasks, "suite directory")->required();
  run->add_option("--pool", run_pool, "pool directory (recreated)");
  run->add_option("--config", run_config, "experiment config json");
  run->add_option("--protocol", protocol, "white or black")->check(CLI::IsMember({"white", "black"}));
  run->add_option("--m", exp.m_values, "m values")->delimiter(',');
  run->add_option("--e", exp.e_values, "subset sizes")->delimiter(',');
  run->add_option("--seeds", exp.seeds, "seeds per (task, e)");
  run->add_option("--initial-pool", exp.initial_pool, "tasks trained straight into the pool");
  run->add_option("--k", exp.k, "k for selection");
  run->add_flag("--finetune", exp.finetune, "also run the finetune-source baseline");
  run->add_option("--out", run_out, "output directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "flatten run files into CSV and a JSON summary");
  std::vector<std::string> run_files;
  std::string rep_out;
  rep->add_option("--runs", run_files, "run.json files");
  rep->add_option("--out", rep_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      refuse_overwrite(fs::path(gen_out) / "suite.json", force);
      fdims.image.pixel_noise = odims.image.pixel_noise = noise;
      fdims.image.nuisance_scale = odims.image.nuisance_scale = nuisance;
      fdims.classes_per_task = classes_per_task;
      odims.train_per_class = fdims.train_per_class;
      odims.test_per_class = fdims.test_per_class;
      std::vector<TaskSpec> tasks;
      json params = {{"suite", suite_kind}, {"seed", gen_seed}, {"noise", noise}, {"nuisance", nuisance},
                     {"classes_per_task", classes_per_task}};
      if (suite_kind == "family") {
        tasks = gen_family_suite(families, tasks_per_family, fdims, gen_seed);
        params["families"] = families;
        params["tasks_per_family"] = tasks_per_family;
      } else {
        tasks = gen_overlap_suite(n_tasks, classes_per_task, gen_seed, odims);
        params["n_tasks"] = n_tasks;
      }
      save_suite(gen_out, tasks, params);
      std::cout << "wrote " << tasks.size() << " tasks to " << gen_out << "\n";
    } else if (*build) {
      const fs::path pool_dir = resolve_pool(build_pool);
      std::vector<TaskSpec> tasks = load_suite(build_tasks);
      if (build_first > 0 && build_first < tasks.size()) tasks.resize(build_first);
      Pool pool = build_append ? Pool::open(pool_dir)
                               : Pool::create(pool_dir, make_backbone(backbone_preset(backbone_name)), force);
      const TrainConfig base = build_train.apply(desk_source_config());
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        TrainConfig sc = base;
        sc.seed = derive_seed(base.seed, 0x5005ULL, i);
        SourceModelRecord rec = train_source(tasks[i], pool.backbone(), EftConfig::desk(), sc);
        const int id = pool.append(rec);
        std::cout << "model " << id << " <- " << tasks[i].id << " val_acc " << rec.val_accuracy << "\n";
      }
    } else if (*sel) {
      refuse_overwrite(sel_out, force);
      const Pool pool = Pool::open(resolve_pool(sel_pool));
      const TaskSpec target = load_target(sel_task, sel_e, sel_seed);
      const auto models = pool.load_all();
      const SelectionReport report = select_top_m(models, pool.backbone(), target, sel_cfg);
      write_json(sel_out, report, force);
    } else if (*mix) {
      refuse_overwrite(mix_out, force);
      const Pool pool = Pool::open(resolve_pool(mix_pool));
      TrainConfig tc = mix_train.apply(desk_target_config());
      tc.sigma = sigma;
      tc.lambda_new = lambda_new;
      tc.random_new_init = random_init;
      const TaskSpec target = load_target(mix_task, mix_e, tc.seed);
      const EftConfig eft = EftConfig::desk();
      FeatureCache cache(pool.backbone(), target);
      json out = {{"task", target.id}, {"protocol", black ? "black" : "white"}, {"config", tc}, {"m", mix_m}};
      std::vector<SourceModelRecord> chosen;
      if (mix_m > 0) {
        const SelectionReport report = select_top_m(pool.load_all(), pool.backbone(), target, {mix_k, mix_m}, &cache);
        out["selection"] = report;
        for (int id : report.selected) chosen.push_back(pool.load(id));
      }
      MixedRun result;
      if (black) {
        const Backbone target_bb = make_backbone(backbone_preset(target_backbone_name));
        std::vector<PoolModelApi> apis;
        for (auto& rec : chosen) apis.emplace_back(rec, pool.backbone());
        std::vector<const FeatureApi*> handles;
        for (const auto& a : apis) handles.push_back(&a);
        BlackboxModel bbm = build_blackbox_model(handles, target_bb, eft, target, tc);
        bbm.model.freeze_lambda = freeze;
        result = train_mixed(std::move(bbm.model), target_bb, target, tc);
      } else {
        MixedModel model = build_mixed_model(pool.backbone(), target, chosen, cache, eft, tc,
                                             features_only ? MixMode::FeaturesOnly : MixMode::ParamsAndFeatures);
        model.freeze_lambda = freeze;
        result = train_mixed(std::move(model), pool.backbone(), target, tc);
      }
      out["run"] = result;
      out["final_test_accuracy"] = result.test_accuracy;
      write_json(mix_out, out, force);
      std::cout << "test accuracy " << result.test_accuracy << "\n";
    } else if (*grid) {
      refuse_overwrite(grid_out, force);
      const Pool pool = Pool::open(resolve_pool(grid_pool));
      TrainConfig tc = TrainConfig::with_default_lattice(grid_train.apply(desk_target_config()));
      if (!grid_lr.empty()) tc.grid_lr = grid_lr;
      if (!grid_wd.empty()) tc.grid_weight_decay = grid_wd;
      if (!grid_lam.empty()) tc.grid_lambda_new = grid_lam;
      const TaskSpec target = load_target(grid_task, grid_e, tc.seed);
      const SelectionReport report = select_top_m(pool.load_all(), pool.backbone(), target, {grid_k, grid_m});
      std::vector<SourceModelRecord> chosen;
      for (int id : report.selected) chosen.push_back(pool.load(id));
      const GridResult result = grid_search(target, pool.backbone(), chosen, EftConfig::desk(), tc);
      write_json(grid_out, {{"task", target.id}, {"selection", report}, {"grid", result}}, force);
    } else if (*run) {
      const fs::path out_dir = run_out;
      refuse_overwrite(out_dir / "run.json", force);
      if (!run_config.empty()) {
        const ExperimentConfig from_file = experiment_config_from_json(json::parse(read_file(run_config)));
        // Flags given on the command line win over the file.
        ExperimentConfig merged = from_file;
        if (run->count("--m")) merged.m_values = exp.m_values;
        if (run->count("--e")) merged.e_values = exp.e_values;
        if (run->count("--seeds")) merged.seeds = exp.seeds;
        if (run->count("--initial-pool")) merged.initial_pool = exp.initial_pool;
        if (run->count("--k")) merged.k = exp.k;
        if (run->count("--finetune")) merged.finetune = exp.finetune;
        exp = merged;
      }
      if (run->count("--protocol") || run_config.empty()) exp.protocol = protocol == "black" ? Protocol::Black : Protocol::White;
      const fs::path pool_dir = std::getenv("RECYCLE_POOL") || !run_pool.empty() ? resolve_pool(run_pool) : out_dir / "pool";
      const std::vector<TaskSpec> suite = load_suite(run_tasks);
      const std::vector<ReportRow> rows = run_experiment(suite, exp, pool_dir, force);
      json rows_json = rows;
      write_json(out_dir / "run.json", {{"config", exp}, {"rows", rows_json}}, force);
      write_file_atomic(out_dir / "report.csv", report_csv(rows));
      write_file_atomic(out_dir / "summary.json", report_summary(rows).dump(2) + "\n");
      std::cout << "wrote " << rows.size() << " rows to " << out_dir.string() << "\n";
    } else if (*rep) {
      const fs::path out_dir = rep_out;
      refuse_overwrite(out_dir / "report.csv", force);
      std::vector<ReportRow> rows;
      for (const auto& file : run_files) {
        try {
          const json j = json::parse(read_file(file));
          std::vector<ReportRow> parsed;
          for (const auto& r : j.at("rows")) parsed.push_back(report_row_from_json(r));
          rows.insert(rows.end(), parsed.begin(), parsed.end());
        } catch (const std::exception& e) {
          std::cerr << "warning: skipping " << file << ": " << e.what() << "\n";
        }
      }
      write_file_atomic(out_dir / "report.csv", report_csv(rows));
      write_file_atomic(out_dir / "summary.json", report_summary(rows).dump(2) + "\n");
      std::cout << "wrote " << rows.size() << " rows to " << out_dir.string() << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

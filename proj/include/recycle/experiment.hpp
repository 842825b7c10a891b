#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/blackbox.hpp"
#include "recycle/mixer.hpp"
#include "recycle/pool.hpp"

namespace recycle {

/// Desk-scale training presets used by the harness and the CLI defaults.
TrainConfig desk_source_config();
TrainConfig desk_target_config();

// ---------------------------------------------------------------------------
// Grid search

struct GridCell {
  double lr = 0, weight_decay = 0, lambda_new = 0;
  bool ok = false;
  std::string error;
  double val_accuracy = 0, test_accuracy = 0;
};

struct GridResult {
  std::vector<GridCell> cells;  // lattice order: lr-major, then weight decay, then lambda_new
  std::optional<std::size_t> best;
  TrainConfig best_config;
};

/// Trains one mixed model per lattice point and keeps the best validation
/// accuracy; the earliest cell in lattice order wins ties. Failing cells are
/// recorded and skipped.
GridResult grid_search(const TaskSpec& task, const Backbone& backbone, std::span<const SourceModelRecord> sources,
                       const EftConfig& eft, const TrainConfig& base, MixMode mode = MixMode::ParamsAndFeatures);

void to_json(nlohmann::json& j, const GridResult& g);

// ---------------------------------------------------------------------------
// Pool-then-adapt-then-append runs

enum class Protocol { White, Black };

struct ExperimentConfig {
  Protocol protocol = Protocol::White;
  std::vector<std::size_t> m_values{0, 1};
  std::vector<std::size_t> e_values{20};
  std::size_t seeds = 1;
  std::size_t initial_pool = 4;  // first tasks trained straight into the pool
  std::size_t k = 5;
  bool finetune = false;         // also run the finetune-source baseline
  TrainConfig source = desk_source_config();
  TrainConfig target = desk_target_config();
  EftConfig eft = EftConfig::desk();
  BackboneConfig backbone = BackboneConfig::desk();
  BackboneConfig target_backbone = BackboneConfig::narrow();  // black-box target model

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

struct ReportRow {
  std::string task;
  std::string method;  // independent | mix | finetune
  std::size_t m = 0, e = 0, seed = 0;
  std::string status = "ok";
  double val_acc = 0, test_acc = 0;
  std::string lambda_digest;  // FNV-1a of the per-epoch lambda trajectory, hex
  std::vector<int> selected;
};

void to_json(nlohmann::json& j, const ReportRow& r);
ReportRow report_row_from_json(const nlohmann::json& j);

/// Seeds the pool with the first `initial_pool` tasks, then for each later
/// task: select, adapt under every (m, e, seed), evaluate, and append a model
/// trained on the task's full data. Stage failures become rows with an error
/// status; the run continues.
std::vector<ReportRow> run_experiment(const std::vector<TaskSpec>& suite, const ExperimentConfig& cfg,
                                      const std::filesystem::path& pool_dir, bool force = false);

/// FNV-1a digest of the realized lambda rows across epochs.
std::string lambda_digest(const std::vector<EpochRecord>& history);

// ---------------------------------------------------------------------------
// Reports

std::string report_csv(const std::vector<ReportRow>& rows);
/// Means and population standard deviations per (method, m, e), plus totals.
nlohmann::json report_summary(const std::vector<ReportRow>& rows);

}  // namespace recycle

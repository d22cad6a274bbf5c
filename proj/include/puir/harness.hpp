#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "puir/config.hpp"
#include "puir/evaluation.hpp"
#include "puir/metrics.hpp"
#include "puir/trainer.hpp"

namespace puir::harness {

namespace fs = std::filesystem;

/// One constraint combination. Contrastive and decomposition terms are always on.
struct CellSpec {
  std::string name;
  bool equivariance = false;
  bool invariance = false;
  bool prior = false;
};

/// The six combinations compared in the ablation, ending with the full model.
const std::vector<CellSpec>& ablation_grid();
const CellSpec& cell_by_name(const std::string& name);

struct AblationCell {
  CellSpec spec;
  std::uint64_t seed = 0;
  /// "ok" or "failed".
  std::string status = "ok";
  std::string error;
  fs::path checkpoint;
  fs::path seg_checkpoint;
  trainer::LossReport initial;
  trainer::LossReport final;
  metrics::MetricsReport metrics;

  nlohmann::json to_json() const;
};

/// Pre-training config of one cell: the base config with disabled terms
/// weighted 0 and the prior bank switched off when the cell excludes it.
trainer::TrainConfig cell_config(const config::ExperimentConfig& cfg, const CellSpec& cell, std::uint64_t seed);
fs::path cell_dir(const config::ExperimentConfig& cfg, const CellSpec& cell, std::uint64_t seed);

/// Hash over every volume and label byte of the corpus, in order.
std::string corpus_fingerprint(const trainer::Corpus& corpus);

/// Pre-trains with `cfg`, or reuses the checkpoint in cfg.out_dir when a
/// previous run with the same config and corpus completed there.
trainer::RunResult pretrain_cached(const trainer::TrainConfig& cfg, const trainer::Corpus& corpus);
/// Fine-tuning counterpart of pretrain_cached; `from` is part of the cache key.
trainer::RunResult finetune_cached(const trainer::TrainConfig& cfg, const trainer::Corpus& corpus,
                                   const fs::path& from);

struct AblationOptions {
  /// Reuse completed runs found in the output directory.
  bool reuse = true;
  /// Cells whose pre-training throws are recorded as failed and skipped.
  bool quarantine = true;
};

/// Trains every selected cell for every seed and evaluates held-out
/// cross-modality transfer, plus segmentation when the config asks for it.
std::vector<AblationCell> run_ablation(const config::ExperimentConfig& cfg, const trainer::Corpus& corpus,
                                       const AblationOptions& opts = {});

/// Average held-out transfer SSIM of each ok cell, keyed by cell name, for one seed.
std::map<std::string, double> average_metric(const std::vector<AblationCell>& cells, std::uint64_t seed,
                                             const std::string& metric);

struct AuditMismatch {
  std::string cell;
  std::uint64_t seed = 0;
  std::string setting;
  std::string metric;
  double reported = 0.0;
  double recomputed = 0.0;
};
/// Re-derives every transfer number from the stored checkpoints and reports
/// those differing by more than `tolerance`.
std::vector<AuditMismatch> audit(const std::vector<AblationCell>& cells, const trainer::Corpus& corpus,
                                 double tolerance = 1e-6);

struct GradcheckResult {
  std::string target;
  double max_rel_error = 0.0;
  /// Set when the instance sits on a non-smooth point and was not checked.
  bool skipped = false;
  std::string note;
  int checked = 0;
};
/// Names accepted by gradcheck.
std::vector<std::string> gradcheck_targets();
/// Central differences with step 1e-5 against the analytic gradient on a
/// random tiny instance; throws std::invalid_argument for unknown targets.
GradcheckResult gradcheck(const std::string& target, std::uint64_t seed);

/// A named series of per-epoch loss values.
struct Curve {
  std::string label;
  std::vector<double> values;
};

struct ExperimentResults {
  std::string experiment;
  std::uint64_t seed = 0;
  metrics::MetricsReport metrics;
  std::vector<Curve> curves;
  /// Bar chart values per metric, keyed by bar label.
  std::map<std::string, std::map<std::string, double>> bars;

  nlohmann::json to_json() const;
  static ExperimentResults from_json(const nlohmann::json& j);
  bool operator==(const ExperimentResults&) const;
};

/// Writes {experiment}_{seed}.csv and .json, {experiment}_{seed}_loss.svg when
/// curves exist, and {experiment}_{seed}_{metric}.svg per bar metric. Returns the paths.
std::vector<fs::path> emit_report(const ExperimentResults& results, const fs::path& dir);

/// Loss curves of a training run: one curve per component.
std::vector<Curve> loss_curves(const std::vector<trainer::LossReport>& epochs, const std::string& prefix);

}  // namespace puir::harness

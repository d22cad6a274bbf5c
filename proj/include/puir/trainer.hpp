#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "puir/io.hpp"
#include "puir/losses.hpp"
#include "puir/model.hpp"
#include "puir/optim.hpp"
#include "puir/phantom.hpp"

namespace puir::trainer {

namespace fs = std::filesystem;
using losses::LossReport;
using losses::LossWeights;
using model::Model;
using model::ModelConfig;
using phantom::MultiModalSample;

enum class Task { kPretrain, kFinetuneSeg, kFinetuneTransfer };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct TrainConfig {
  Task task = Task::kPretrain;
  fs::path manifest;
  fs::path out_dir;
  int epochs = 30;
  /// Individuals whose losses are summed before one optimizer update.
  int batch_size = 1;
  double lr = 2e-4;
  std::string optimizer = "adam";
  std::uint64_t seed = 0;
  LossWeights weights;
  ModelConfig model;
  phantom::AugmentConfig augment;
  int checkpoint_every = 10;
  /// Randomize the per-step modality order instead of manifest order.
  bool shuffle_modalities = false;
  /// Arithmetic running mean instead of pairwise halving.
  bool exact_mean = false;
  /// Detach the running mean when used as the invariance target.
  bool inv_stop_grad = false;
  /// Fine-tuning subset policy: "uniform" over non-empty subsets, or "full".
  std::string missingness = "uniform";
  /// Use only the first n training individuals (0 = all).
  int max_train = 0;

  void validate() const;
  nlohmann::json to_json() const;
  std::string hash() const;
};

/// Parameters plus optimizer, owned by one training loop.
struct TrainState {
  Model model;
  optim::Adam optimizer;
  int epoch = 0;
  long step = 0;

  TrainState(const ModelConfig& cfg, std::uint64_t seed, double lr);
  explicit TrainState(Model m, double lr);
};

/// Manifest plus every individual loaded into memory.
struct Corpus {
  io::DatasetManifest manifest;
  std::vector<MultiModalSample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  static Corpus load(const fs::path& manifest_path);
  static Corpus from_samples(std::vector<MultiModalSample> samples);
  std::vector<std::string> modality_ids() const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Standardized volume replicated across the model's input channels.
model::Tensor network_input(const Volume& v, int modalities);

/// Channel stack of every modality of `s` in the given order.
model::Tensor modality_stack(const MultiModalSample& s, const std::vector<std::string>& order);

struct PretrainInputs {
  const MultiModalSample* sample = nullptr;
  /// Individual supplying the contrastive negative; may be null.
  const MultiModalSample* negative = nullptr;
  std::vector<std::string> modality_order;
  std::uint64_t seed = 0;
};

/// Builds the pre-training loss graph for one individual and returns its
/// total; `report` receives the unweighted components.
model::Tensor pretrain_objective(const Model& m, const PretrainInputs& in, const TrainConfig& cfg,
                                 LossReport* report);
/// Objective plus one optimizer update.
LossReport pretrain_step(const PretrainInputs& in, TrainState& state, const TrainConfig& cfg);

struct FinetuneInputs {
  const MultiModalSample* sample = nullptr;
  /// Available modalities in processing order; must be non-empty.
  std::vector<std::string> available;
  std::vector<std::string> modality_order;
  std::vector<double> class_weights;
};

model::Tensor finetune_seg_objective(const Model& m, const FinetuneInputs& in, const TrainConfig& cfg,
                                     LossReport* report);
model::Tensor finetune_transfer_objective(const Model& m, const FinetuneInputs& in, const TrainConfig& cfg,
                                          LossReport* report);

/// Results of a training run.
struct RunResult {
  fs::path checkpoint;
  std::vector<LossReport> epoch_means;
  /// Pre-training objective over the training set before and after training,
  /// evaluated with fixed augmentation and rotation draws.
  LossReport initial;
  LossReport final;
  std::string parameter_hash;
};

RunResult pretrain(const TrainConfig& cfg, const Corpus& corpus);
/// Fine-tunes starting from `from` (a checkpoint path) or, when empty, a fresh model.
RunResult finetune_seg(const TrainConfig& cfg, const Corpus& corpus, const fs::path& from);
RunResult finetune_transfer(const TrainConfig& cfg, const Corpus& corpus, const fs::path& from);

/// Checkpoint metadata carries the model config, its hash and the modality ids.
void save_model(const Model& m, const fs::path& path, const nlohmann::json& extra,
                const std::vector<std::string>& modalities, const optim::Adam* opt = nullptr);
struct LoadedModel {
  Model model;
  std::vector<std::string> modalities;
  nlohmann::json metadata;
};
/// When `expected` is given the stored config hash must match it unless
/// `allow_mismatch`; shapes must match in every case.
LoadedModel load_model(const fs::path& path, const std::optional<ModelConfig>& expected = std::nullopt,
                       bool allow_mismatch = false);

Volume infer_transfer(const Model& m, const std::vector<std::string>& modalities, const Volume& source,
                      const std::string& source_modality, const std::string& target_modality);
/// Averages fused features and skip features over the available modalities,
/// then thresholds foreground probability at 0.5.
LabelVolume infer_seg(const Model& m, const std::vector<std::pair<std::string, const Volume*>>& available);
/// Foreground probability map under the same averaging.
Volume infer_seg_probability(const Model& m,
                             const std::vector<std::pair<std::string, const Volume*>>& available);

/// Pooled fused representation of one modality (rotation 0), used for embedding diagnostics.
std::vector<double> fused_embedding(const Model& m, const Volume& v);

}  // namespace puir::trainer

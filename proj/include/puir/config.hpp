#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "puir/phantom.hpp"
#include "puir/trainer.hpp"

namespace puir::config {

namespace fs = std::filesystem;

/// Malformed or inconsistent configuration; the message names the key or line.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parses the flat subset of TOML used by experiment files: comments, [table]
/// headers, and `key = value` with strings, integers, floats, booleans and
/// single-line arrays of those. Returns dotted keys ("train.lr") mapped to values.
std::map<std::string, nlohmann::json> parse_toml(const std::string& text);

/// Parses a command-line override "key=value"; the value uses TOML syntax, and a
/// bare word that is not a number or boolean is taken as a string.
std::pair<std::string, nlohmann::json> parse_override(const std::string& kv);

struct FinetuneSettings {
  int epochs = 10;
  double lr = 1e-3;
  double w_inv = 1.0;
  std::string missingness = "uniform";
};

struct ExperimentConfig {
  std::string name = "phantom";
  fs::path output_dir = "runs";
  fs::path data_dir = "data/phantom";
  phantom::DatasetConfig data;
  /// Pre-training settings; seed and out_dir are filled per run.
  trainer::TrainConfig train;
  FinetuneSettings finetune;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  /// Ablation cells to run by name; empty means the full grid.
  std::vector<std::string> ablation_cells;
  bool ablation_finetune_seg = false;

  /// Sets one dotted key; throws ConfigError for unknown keys or wrong types.
  void set(const std::string& key, const nlohmann::json& value);
  void validate() const;
  nlohmann::json to_json() const;

  fs::path manifest_path() const { return data_dir / "manifest.json"; }
  trainer::TrainConfig pretrain_config(std::uint64_t seed, const fs::path& out_dir) const;
  trainer::TrainConfig finetune_config(trainer::Task task, std::uint64_t seed, const fs::path& out_dir) const;
};

/// Reads a TOML file into a config. Relative paths resolve against the current directory.
ExperimentConfig load_experiment(const fs::path& path);
ExperimentConfig experiment_from_toml(const std::string& text);

/// Replaces the seed list with the value of PUIR_SEED when that variable is set.
void apply_seed_override(ExperimentConfig& cfg);

}  // namespace puir::config

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "puir/autograd.hpp"
#include "puir/rotation.hpp"

namespace puir::losses {

using ag::Tensor;

struct LossWeights {
  double contr = 1.0;
  double decom = 1.0;
  double equ = 1.0;
  double inv = 1.0;
  double temperature = 0.5;

  /// Throws std::invalid_argument on a negative or non-finite weight or t <= 0.
  void validate() const;
};

struct LossReport {
  double contr = 0.0;
  double decom = 0.0;
  double equ = 0.0;
  double inv = 0.0;
  double total = 0.0;
  // Fine-tuning components.
  double dice = 0.0;
  double wce = 0.0;
  double task = 0.0;
  /// Set when a probability was clamped at the log floor.
  bool clamped = false;

  nlohmann::json to_json() const;
};

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kDiceEps = 1e-5;
inline constexpr double kUnitNormTolerance = 1e-3;

/// InfoNCE with dot-product similarity. The denominator runs over the positive
/// and every entry of `negatives`. All embeddings must be unit norm.
Tensor contrastive_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives,
                        double temperature);

/// Mean squared difference; gradient reaches both arguments.
Tensor invariance_loss(const Tensor& fused, const Tensor& target);

/// Undefined running value -> `next`; otherwise (running + next) / 2.
Tensor sequential_mean_update(const Tensor& running, const Tensor& next);

/// Running average of fused representations within one step.
class RunningMean {
 public:
  /// `exact` keeps the arithmetic mean instead of pairwise halving.
  explicit RunningMean(bool exact = false) : exact_(exact) {}
  bool empty() const { return count_ == 0; }
  int count() const { return count_; }
  const Tensor& value() const { return value_; }
  void update(const Tensor& next);

 private:
  bool exact_;
  int count_ = 0;
  Tensor value_;
};

/// -log probs[true class], floored at kLogFloor. Sets *clamped when the floor is hit.
Tensor equivariance_loss(const Tensor& probs, RotationTransform truth, bool* clamped = nullptr);

/// Undo `rotation` on every decoded channel, then MSE against the full stack.
Tensor decomposition_loss(const Tensor& decoded, RotationTransform rotation, const Tensor& targets);

/// Weighted sum of the four pre-training terms.
Tensor pretrain_loss(const Tensor& contr, const Tensor& decom, const Tensor& equ, const Tensor& inv,
                     const LossWeights& w);
double pretrain_loss(const LossReport& parts, const LossWeights& w);

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
Tensor dice_loss(const Tensor& probs, const Tensor& labels);

/// Mean over voxels of -w[g] log p[g]. `probs` is [C, ...] channel-major,
/// `labels` holds one class index per voxel.
Tensor weighted_ce_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                        const std::vector<double>& class_weights, bool* clamped = nullptr);

/// Inverse-frequency class weights normalized to mean 1 over present classes.
std::vector<double> inverse_frequency_weights(const std::vector<std::uint64_t>& counts);

/// Sum over channels of the per-channel MSE.
Tensor transfer_loss(const Tensor& decoded, const Tensor& targets);

Tensor downstream_loss(const Tensor& task, const Tensor& inv, double w_inv);

}  // namespace puir::losses

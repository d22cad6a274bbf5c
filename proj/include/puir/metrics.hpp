#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "puir/volume.hpp"

namespace puir::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPersonalizationCap = 1e6;

/// 10 log10(R^2 / MSE) with R the ground-truth range. Returns +inf for an exact
/// match; throws std::invalid_argument for a constant ground truth.
double psnr(const Volume& pred, const Volume& gt);
/// PSNR with +inf replaced by kPsnrCap, for tables.
inline double capped_psnr(double v) { return v > kPsnrCap ? kPsnrCap : v; }

/// ||pred - gt||^2 / ||gt||^2.
double nmse(const Volume& pred, const Volume& gt);

/// Mean SSIM over every fully contained cubic window of odd side `window`,
/// using population window statistics and constants (k R)^2 with R the
/// ground-truth range.
double ssim3d(const Volume& pred, const Volume& gt, int window = 7, double k1 = 0.01, double k2 = 0.03);

/// 2|P & G| / (|P| + |G|); 1 when both masks are empty. Masks must be 0/1.
double dice(const LabelVolume& pred, const LabelVolume& gt);

enum class CaseOutcome { kTruePositive, kFalseNegative, kTrueNegative, kFalsePositive };
std::string to_string(CaseOutcome c);

/// A case is positive when its mask is non-empty.
CaseOutcome classify_case(const LabelVolume& pred, const LabelVolume& gt);

struct ChallengeDice {
  double value = 0.0;
  CaseOutcome outcome = CaseOutcome::kTruePositive;
};
/// Plain dice when both masks are non-empty, otherwise 0.
ChallengeDice challenge_dice(const LabelVolume& pred, const LabelVolume& gt);

/// Case-level detection rates. A rate is empty when its denominator is zero.
struct ConfusionRates {
  std::optional<double> tpr, tnr, fnr, fpr;
  int positives = 0;
  int negatives = 0;
};
ConfusionRates confusion_rates(std::span<const CaseOutcome> cases);
ConfusionRates confusion_rates(const LabelVolume& pred, const LabelVolume& gt);

struct ModalitySubset {
  /// Indices of present modalities, ascending.
  std::vector<int> present;
  int mn = 0;

  /// e.g. "t1+pet" given modality names.
  std::string label(const std::vector<std::string>& names) const;
  bool operator==(const ModalitySubset&) const = default;
};
/// All non-empty subsets, ordered by MN and then lexicographically by index list.
std::vector<ModalitySubset> enumerate_missingness(int num_modalities);

/// Mean distance over cross-individual pairs divided by mean distance over
/// same-individual, cross-modality pairs. Returns kPersonalizationCap when
/// the intra distance vanishes, NaN when both vanish.
double personalization_score(const std::map<std::pair<std::string, std::string>, std::vector<double>>& embeddings);

struct KlResult {
  double value = 0.0;
  /// Dimensions whose variance hit the floor in either set.
  std::vector<int> degenerate_dims;
};
inline constexpr double kVarianceFloor = 1e-8;
/// Symmetrized KL between diagonal Gaussian fits (sample variance) of two sets.
KlResult gaussian_kl_divergence(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct MetricRow {
  std::string setting_id;
  std::string present_modalities;
  int mn = 0;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
  int count = 0;
};

/// Flat table of (setting, metric, value) rows.
struct MetricsReport {
  std::vector<MetricRow> rows;

  void add(const std::string& setting_id, const std::string& present, int mn, const std::string& metric,
           double value);
  /// Mean and population std of `metric` per MN, skipping non-finite values.
  std::map<int, Aggregate> by_mn(const std::string& metric) const;
  std::vector<double> values(const std::string& metric) const;

  /// Header: setting_id,present_modalities,MN,metric,value
  std::string to_csv() const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

}  // namespace puir::metrics

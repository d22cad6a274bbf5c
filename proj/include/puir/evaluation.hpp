#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "puir/metrics.hpp"
#include "puir/trainer.hpp"

namespace puir::evaluation {

using model::Model;
using trainer::Corpus;

/// Fraction of (individual, modality, quarter turn) triples whose most
/// probable rotation class is the applied one.
double rotation_accuracy(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals);

/// Mean over individuals, modalities and k = 1..3 of
/// ||rot_k^-1(D(E(rot_k x))) - D(E(x))||^2 divided by the variance of D(E(x)).
double equivariance_error(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals);

struct FusedDistance {
  /// Mean squared distance between fused feature maps of two modalities of one individual.
  double raw = 0.0;
  /// `raw` divided by twice the total per-map variance of all fused maps about their mean,
  /// so that rescaling the features leaves it unchanged.
  double normalized = 0.0;
};
FusedDistance fused_distance(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals);

/// Image metrics for every ordered (source, target) modality pair, decoded
/// directly from the source's representation.
metrics::MetricsReport transfer_report(const Model& m, const Corpus& corpus,
                                       const std::vector<std::size_t>& individuals, const std::string& setting);
double mean_metric(const metrics::MetricsReport& r, const std::string& metric);

/// Segmentation metrics for every modality subset, one row per (subset, metric),
/// averaged over individuals: dice, challenge_dice, tpr, tnr, fnr, fpr.
metrics::MetricsReport segmentation_report(const Model& m, const Corpus& corpus,
                                           const std::vector<std::size_t>& individuals);

/// Personalization score of pooled fused embeddings over the given individuals.
double personalization(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals);

/// Binary lesion mask of one individual.
LabelVolume lesion_mask(const phantom::MultiModalSample& s);

}  // namespace puir::evaluation

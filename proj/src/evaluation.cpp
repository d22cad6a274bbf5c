#include "puir/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace puir::evaluation {

namespace {

using ag::Tensor;
using phantom::apply_rotation;

void require_individuals(const Corpus& corpus, const std::vector<std::size_t>& individuals) {
  if (individuals.empty()) throw std::invalid_argument("evaluation: no individuals given");
  for (auto i : individuals) {
    if (i >= corpus.samples.size()) throw std::out_of_range("evaluation: individual index out of range");
  }
}

double mean_sq_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double variance(const std::vector<double>& a) {
  double mean = 0.0;
  for (double v : a) mean += v;
  mean /= static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a) s += (v - mean) * (v - mean);
  return s / static_cast<double>(a.size());
}

/// Decoded stack of a rotated input, rotated back, channel-major flattened.
std::vector<double> decoded_back(const Model& m, const Volume& x, RotationTransform r) {
  const int nm = m.config().modalities;
  const auto enc = m.encode(trainer::network_input(apply_rotation(x, r), nm));
  const Tensor y = m.decode(m.represent(enc.final), enc.intermediates);
  std::vector<double> out;
  out.reserve(y.size());
  for (int c = 0; c < nm; ++c) {
    const Volume back = apply_rotation(model::channel_to_volume(y, c), r.inverse());
    out.insert(out.end(), back.data().begin(), back.data().end());
  }
  return out;
}

}  // namespace

LabelVolume lesion_mask(const phantom::MultiModalSample& s) {
  LabelVolume out(s.seg_labels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s.seg_labels[i] == phantom::kLesion ? 1 : 0;
  return out;
}

double rotation_accuracy(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals) {
  require_individuals(corpus, individuals);
  ag::NoGradGuard ng;
  const int nm = m.config().modalities;
  int correct = 0, total = 0;
  for (auto i : individuals) {
    const auto& s = corpus.samples[i];
    for (const auto& mod : s.modality_order) {
      for (int k = 0; k < 4; ++k) {
        const Volume x = apply_rotation(s.volume(mod), RotationTransform(k));
        const auto p = m.predict_rotation(m.encode(trainer::network_input(x, nm)).final).data();
        const int guess = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        correct += guess == k;
        ++total;
      }
    }
  }
  return static_cast<double>(correct) / total;
}

double equivariance_error(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals) {
  require_individuals(corpus, individuals);
  ag::NoGradGuard ng;
  double sum = 0.0;
  int n = 0;
  for (auto i : individuals) {
    const auto& s = corpus.samples[i];
    for (const auto& mod : s.modality_order) {
      const Volume& x = s.volume(mod);
      const auto y0 = decoded_back(m, x, RotationTransform(0));
      const double var = std::max(variance(y0), 1e-12);
      for (int k = 1; k < 4; ++k) {
        sum += mean_sq_diff(decoded_back(m, x, RotationTransform(k)), y0) / var;
        ++n;
      }
    }
  }
  return sum / n;
}

FusedDistance fused_distance(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals) {
  require_individuals(corpus, individuals);
  ag::NoGradGuard ng;
  const int nm = m.config().modalities;
  std::vector<std::vector<std::vector<double>>> maps;
  for (auto i : individuals) {
    const auto& s = corpus.samples[i];
    if (s.modality_order.size() < 2) throw std::invalid_argument("fused_distance: need >= 2 modalities");
    auto& per = maps.emplace_back();
    for (const auto& mod : s.modality_order) {
      const auto enc = m.encode(trainer::network_input(s.volume(mod), nm));
      per.push_back(m.represent(enc.final).data());
    }
  }
  double raw = 0.0;
  int pairs = 0;
  std::vector<double> centroid(maps.front().front().size(), 0.0);
  int count = 0;
  for (const auto& per : maps) {
    for (std::size_t a = 0; a < per.size(); ++a) {
      for (std::size_t k = 0; k < centroid.size(); ++k) centroid[k] += per[a][k];
      ++count;
      for (std::size_t b = a + 1; b < per.size(); ++b) {
        raw += mean_sq_diff(per[a], per[b]);
        ++pairs;
      }
    }
  }
  for (auto& c : centroid) c /= count;
  double spread = 0.0;
  for (const auto& per : maps) {
    for (const auto& f : per) spread += mean_sq_diff(f, centroid);
  }
  spread /= count;
  FusedDistance out;
  out.raw = raw / pairs;
  out.normalized = spread > 0.0 ? out.raw / (2.0 * spread) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

metrics::MetricsReport transfer_report(const Model& m, const Corpus& corpus,
                                       const std::vector<std::size_t>& individuals, const std::string& setting) {
  require_individuals(corpus, individuals);
  const auto mods = corpus.modality_ids();
  const int mn = static_cast<int>(mods.size()) - 1;
  metrics::MetricsReport rep;
  for (const auto& src : mods) {
    for (const auto& tgt : mods) {
      if (src == tgt) continue;
      double ssim = 0.0, psnr = 0.0, nmse = 0.0;
      for (auto i : individuals) {
        const auto& s = corpus.samples[i];
        const Volume pred = trainer::infer_transfer(m, mods, s.volume(src), src, tgt);
        const Volume& gt = s.volume(tgt);
        ssim += metrics::ssim3d(pred, gt);
        psnr += metrics::capped_psnr(metrics::psnr(pred, gt));
        nmse += metrics::nmse(pred, gt);
      }
      const double n = static_cast<double>(individuals.size());
      const std::string id = setting + ":" + src + "->" + tgt;
      rep.add(id, src, mn, "ssim", ssim / n);
      rep.add(id, src, mn, "psnr", psnr / n);
      rep.add(id, src, mn, "nmse", nmse / n);
    }
  }
  return rep;
}

double mean_metric(const metrics::MetricsReport& r, const std::string& metric) {
  const auto v = r.values(metric);
  if (v.empty()) throw std::invalid_argument("mean_metric: no rows for '" + metric + "'");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

metrics::MetricsReport segmentation_report(const Model& m, const Corpus& corpus,
                                           const std::vector<std::size_t>& individuals) {
  require_individuals(corpus, individuals);
  const auto mods = corpus.modality_ids();
  std::vector<LabelVolume> gts;
  for (auto i : individuals) gts.push_back(lesion_mask(corpus.samples[i]));
  metrics::MetricsReport rep;
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& subset : metrics::enumerate_missingness(static_cast<int>(mods.size()))) {
    const std::string label = subset.label(mods);
    double dice = 0.0, challenge = 0.0;
    std::vector<metrics::CaseOutcome> cases;
    for (std::size_t j = 0; j < individuals.size(); ++j) {
      const auto& s = corpus.samples[individuals[j]];
      std::vector<std::pair<std::string, const Volume*>> available;
      for (int p : subset.present) available.emplace_back(mods[p], &s.volume(mods[p]));
      const LabelVolume pred = trainer::infer_seg(m, available);
      dice += metrics::dice(pred, gts[j]);
      const auto c = metrics::challenge_dice(pred, gts[j]);
      challenge += c.value;
      cases.push_back(c.outcome);
    }
    const double n = static_cast<double>(individuals.size());
    const auto rates = metrics::confusion_rates(cases);
    rep.add(label, label, subset.mn, "dice", dice / n);
    rep.add(label, label, subset.mn, "challenge_dice", challenge / n);
    rep.add(label, label, subset.mn, "tpr", rates.tpr.value_or(nan));
    rep.add(label, label, subset.mn, "tnr", rates.tnr.value_or(nan));
    rep.add(label, label, subset.mn, "fnr", rates.fnr.value_or(nan));
    rep.add(label, label, subset.mn, "fpr", rates.fpr.value_or(nan));
  }
  return rep;
}

double personalization(const Model& m, const Corpus& corpus, const std::vector<std::size_t>& individuals) {
  require_individuals(corpus, individuals);
  std::map<std::pair<std::string, std::string>, std::vector<double>> emb;
  for (auto i : individuals) {
    const auto& s = corpus.samples[i];
    for (const auto& mod : s.modality_order) emb[{s.individual_id, mod}] = trainer::fused_embedding(m, s.volume(mod));
  }
  return metrics::personalization_score(emb);
}

}  // namespace puir::evaluation

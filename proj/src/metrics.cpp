#include "puir/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace puir::metrics {

namespace {

void require_same_shape(const Shape3& a, const Shape3& b, const char* op) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

double data_range(const Volume& v) {
  const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
  return static_cast<double>(*hi) - static_cast<double>(*lo);
}

void require_binary(const LabelVolume& m, const char* op) {
  for (auto v : m.data()) {
    if (v > 1) throw std::invalid_argument(std::string(op) + ": mask is not binary (value " + std::to_string(v) + ")");
  }
}

/// Sums of `v` over every length-`n` window along one axis; the axis shrinks to extent - n + 1.
std::vector<double> box_sum(const std::vector<double>& v, int (&dims)[3], int axis, int n) {
  int out_dims[3] = {dims[0], dims[1], dims[2]};
  out_dims[axis] = dims[axis] - n + 1;
  std::vector<double> out(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2]);
  const std::size_t stride_in[3] = {static_cast<std::size_t>(dims[1]) * dims[2], static_cast<std::size_t>(dims[2]), 1};
  std::size_t o = 0;
  for (int a = 0; a < out_dims[0]; ++a)
    for (int b = 0; b < out_dims[1]; ++b)
      for (int c = 0; c < out_dims[2]; ++c, ++o) {
        const std::size_t base = a * stride_in[0] + b * stride_in[1] + c * stride_in[2];
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += v[base + k * stride_in[axis]];
        out[o] = s;
      }
  for (int i = 0; i < 3; ++i) dims[i] = out_dims[i];
  return out;
}

std::vector<double> window_sums(std::vector<double> v, const Shape3& s, int n) {
  int dims[3] = {s.d, s.h, s.w};
  for (int axis = 0; axis < 3; ++axis) v = box_sum(v, dims, axis, n);
  return v;
}

}  // namespace

double psnr(const Volume& pred, const Volume& gt) {
  require_same_shape(pred.shape(), gt.shape(), "psnr");
  const double r = data_range(gt);
  if (!(r > 0.0)) throw std::invalid_argument("psnr: ground truth is constant");
  double se = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(gt.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(r * r / mse);
}

double nmse(const Volume& pred, const Volume& gt) {
  require_same_shape(pred.shape(), gt.shape(), "nmse");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double g = gt[i];
    const double d = static_cast<double>(pred[i]) - g;
    num += d * d;
    den += g * g;
  }
  if (!(den > 0.0)) throw std::invalid_argument("nmse: ground truth has zero norm");
  return num / den;
}

double ssim3d(const Volume& pred, const Volume& gt, int window, double k1, double k2) {
  require_same_shape(pred.shape(), gt.shape(), "ssim3d");
  const Shape3 s = gt.shape();
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("ssim3d: window must be odd and positive");
  if (window > s.d || window > s.h || window > s.w) {
    throw std::invalid_argument("ssim3d: window " + std::to_string(window) + " exceeds volume " + s.str());
  }
  const double r = data_range(gt);
  if (!(r > 0.0)) throw std::invalid_argument("ssim3d: ground truth is constant");
  const double c1 = (k1 * r) * (k1 * r);
  const double c2 = (k2 * r) * (k2 * r);

  const std::size_t n = gt.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = pred[i];
    y[i] = gt[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto sx = window_sums(std::move(x), s, window);
  const auto sy = window_sums(std::move(y), s, window);
  const auto sxx = window_sums(std::move(xx), s, window);
  const auto syy = window_sums(std::move(yy), s, window);
  const auto sxy = window_sums(std::move(xy), s, window);

  const double inv = 1.0 / (static_cast<double>(window) * window * window);
  double total = 0.0;
  for (std::size_t i = 0; i < sx.size(); ++i) {
    const double mx = sx[i] * inv, my = sy[i] * inv;
    const double vx = sxx[i] * inv - mx * mx;
    const double vy = syy[i] * inv - my * my;
    const double cxy = sxy[i] * inv - mx * my;
    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(sx.size());
}

double dice(const LabelVolume& pred, const LabelVolume& gt) {
  require_same_shape(pred.shape(), gt.shape(), "dice");
  require_binary(pred, "dice");
  require_binary(gt, "dice");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    p += pred[i];
    g += gt[i];
    both += pred[i] & gt[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::string to_string(CaseOutcome c) {
  switch (c) {
    case CaseOutcome::kTruePositive: return "TP";
    case CaseOutcome::kFalseNegative: return "FN";
    case CaseOutcome::kTrueNegative: return "TN";
    case CaseOutcome::kFalsePositive: return "FP";
  }
  return "?";
}

CaseOutcome classify_case(const LabelVolume& pred, const LabelVolume& gt) {
  require_same_shape(pred.shape(), gt.shape(), "classify_case");
  require_binary(pred, "classify_case");
  require_binary(gt, "classify_case");
  const bool p = pred.count(1) > 0;
  const bool g = gt.count(1) > 0;
  if (g) return p ? CaseOutcome::kTruePositive : CaseOutcome::kFalseNegative;
  return p ? CaseOutcome::kFalsePositive : CaseOutcome::kTrueNegative;
}

ChallengeDice challenge_dice(const LabelVolume& pred, const LabelVolume& gt) {
  const CaseOutcome c = classify_case(pred, gt);
  return {c == CaseOutcome::kTruePositive ? dice(pred, gt) : 0.0, c};
}

ConfusionRates confusion_rates(std::span<const CaseOutcome> cases) {
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (auto c : cases) {
    switch (c) {
      case CaseOutcome::kTruePositive: ++tp; break;
      case CaseOutcome::kFalseNegative: ++fn; break;
      case CaseOutcome::kTrueNegative: ++tn; break;
      case CaseOutcome::kFalsePositive: ++fp; break;
    }
  }
  ConfusionRates r;
  r.positives = tp + fn;
  r.negatives = tn + fp;
  if (r.positives > 0) {
    r.tpr = static_cast<double>(tp) / r.positives;
    r.fnr = static_cast<double>(fn) / r.positives;
  }
  if (r.negatives > 0) {
    r.tnr = static_cast<double>(tn) / r.negatives;
    r.fpr = static_cast<double>(fp) / r.negatives;
  }
  return r;
}

ConfusionRates confusion_rates(const LabelVolume& pred, const LabelVolume& gt) {
  const CaseOutcome c = classify_case(pred, gt);
  return confusion_rates(std::span<const CaseOutcome>(&c, 1));
}

std::string ModalitySubset::label(const std::vector<std::string>& names) const {
  std::string s;
  for (std::size_t i = 0; i < present.size(); ++i) {
    if (i) s += "+";
    s += present[i] < static_cast<int>(names.size()) ? names[present[i]] : std::to_string(present[i]);
  }
  return s;
}

std::vector<ModalitySubset> enumerate_missingness(int num_modalities) {
  if (num_modalities < 1 || num_modalities > 20) {
    throw std::invalid_argument("enumerate_missingness: need 1..20 modalities");
  }
  std::vector<ModalitySubset> out;
  for (unsigned mask = 1; mask < (1u << num_modalities); ++mask) {
    ModalitySubset s;
    for (int i = 0; i < num_modalities; ++i) {
      if (mask & (1u << i)) s.present.push_back(i);
    }
    s.mn = num_modalities - static_cast<int>(s.present.size());
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const ModalitySubset& a, const ModalitySubset& b) {
    if (a.mn != b.mn) return a.mn < b.mn;
    return a.present < b.present;
  });
  return out;
}

double personalization_score(const std::map<std::pair<std::string, std::string>, std::vector<double>>& embeddings) {
  std::map<std::string, int> per_individual;
  for (const auto& [key, v] : embeddings) ++per_individual[key.first];
  if (per_individual.size() < 2) throw std::invalid_argument("personalization_score: need >= 2 individuals");
  for (const auto& [id, n] : per_individual) {
    if (n < 2) throw std::invalid_argument("personalization_score: individual " + id + " has < 2 modalities");
  }
  std::vector<const std::pair<const std::pair<std::string, std::string>, std::vector<double>>*> items;
  for (const auto& e : embeddings) items.push_back(&e);
  const std::size_t dim = items.front()->second.size();
  double inter = 0.0, intra = 0.0;
  std::size_t n_inter = 0, n_intra = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      const auto& a = *items[i];
      const auto& b = *items[j];
      if (a.second.size() != dim || b.second.size() != dim) {
        throw std::invalid_argument("personalization_score: embedding dimensions differ");
      }
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double d = a.second[k] - b.second[k];
        s += d * d;
      }
      const double dist = std::sqrt(s);
      if (a.first.first != b.first.first) {
        inter += dist;
        ++n_inter;
      } else if (a.first.second != b.first.second) {
        intra += dist;
        ++n_intra;
      }
    }
  }
  inter /= static_cast<double>(n_inter);
  intra /= static_cast<double>(n_intra);
  if (intra == 0.0) return inter == 0.0 ? std::numeric_limits<double>::quiet_NaN() : kPersonalizationCap;
  return std::min(inter / intra, kPersonalizationCap);
}

KlResult gaussian_kl_divergence(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("gaussian_kl_divergence: empty sample set");
  const std::size_t dim = a.front().size();
  if (a.size() < dim + 1 || b.size() < dim + 1) {
    throw std::invalid_argument("gaussian_kl_divergence: need at least dim + 1 samples per set");
  }
  auto fit = [dim](const std::vector<std::vector<double>>& s, std::vector<double>& mu, std::vector<double>& var) {
    mu.assign(dim, 0.0);
    var.assign(dim, 0.0);
    for (const auto& x : s) {
      if (x.size() != dim) throw std::invalid_argument("gaussian_kl_divergence: dimension mismatch");
      for (std::size_t k = 0; k < dim; ++k) mu[k] += x[k];
    }
    for (auto& m : mu) m /= static_cast<double>(s.size());
    for (const auto& x : s) {
      for (std::size_t k = 0; k < dim; ++k) var[k] += (x[k] - mu[k]) * (x[k] - mu[k]);
    }
    for (auto& v : var) v /= static_cast<double>(s.size() - 1);
  };
  std::vector<double> ma, va, mb, vb;
  fit(a, ma, va);
  fit(b, mb, vb);
  KlResult r;
  for (std::size_t k = 0; k < dim; ++k) {
    if (va[k] < kVarianceFloor || vb[k] < kVarianceFloor) r.degenerate_dims.push_back(static_cast<int>(k));
    va[k] = std::max(va[k], kVarianceFloor);
    vb[k] = std::max(vb[k], kVarianceFloor);
  }
  auto kl = [dim](const std::vector<double>& m1, const std::vector<double>& v1, const std::vector<double>& m2,
                  const std::vector<double>& v2) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = m1[k] - m2[k];
      s += std::log(v2[k] / v1[k]) + (v1[k] + d * d) / v2[k] - 1.0;
    }
    return 0.5 * s;
  };
  r.value = 0.5 * (kl(ma, va, mb, vb) + kl(mb, vb, ma, va));
  return r;
}

void MetricsReport::add(const std::string& setting_id, const std::string& present, int mn, const std::string& metric,
                        double value) {
  rows.push_back({setting_id, present, mn, metric, value});
}

std::map<int, Aggregate> MetricsReport::by_mn(const std::string& metric) const {
  std::map<int, std::vector<double>> groups;
  for (const auto& r : rows) {
    if (r.metric == metric && std::isfinite(r.value)) groups[r.mn].push_back(r.value);
  }
  std::map<int, Aggregate> out;
  for (const auto& [mn, v] : groups) {
    Aggregate a;
    a.count = static_cast<int>(v.size());
    for (double x : v) a.mean += x;
    a.mean /= a.count;
    for (double x : v) a.std += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(a.std / a.count);
    out[mn] = a;
  }
  return out;
}

std::vector<double> MetricsReport::values(const std::string& metric) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.metric == metric) v.push_back(r.value);
  }
  return v;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "setting_id,present_modalities,MN,metric,value\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.setting_id << ',' << r.present_modalities << ',' << r.mn << ',' << r.metric << ',' << r.value << '\n';
  }
  return os.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    // Non-finite values have no JSON literal; they are written as strings.
    nlohmann::json v = std::isfinite(r.value) ? nlohmann::json(r.value)
                                              : nlohmann::json(std::isnan(r.value) ? "nan" : (r.value > 0 ? "inf" : "-inf"));
    arr.push_back({{"setting_id", r.setting_id},
                   {"present_modalities", r.present_modalities},
                   {"MN", r.mn},
                   {"metric", r.metric},
                   {"value", v}});
  }
  return {{"rows", arr}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport rep;
  for (const auto& r : j.at("rows")) {
    double v;
    const auto& jv = r.at("value");
    if (jv.is_string()) {
      const auto s = jv.get<std::string>();
      v = s == "nan" ? std::numeric_limits<double>::quiet_NaN()
                     : (s == "inf" ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity());
    } else {
      v = jv.get<double>();
    }
    rep.add(r.at("setting_id").get<std::string>(), r.at("present_modalities").get<std::string>(), r.at("MN").get<int>(),
            r.at("metric").get<std::string>(), v);
  }
  return rep;
}

}  // namespace puir::metrics

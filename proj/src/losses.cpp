#include "puir/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace puir::losses {

namespace {

void require_unit(const Tensor& v, const char* what) {
  double s = 0.0;
  for (double x : v.data()) s += x * x;
  const double n = std::sqrt(s);
  if (!(std::abs(n - 1.0) <= kUnitNormTolerance)) {
    throw std::invalid_argument(std::string("contrastive_loss: ") + what + " has norm " +
                                std::to_string(n) + ", expected unit norm");
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + ag::dims_str(a.shape()) +
                                " vs " + ag::dims_str(b.shape()));
  }
}

void require_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string("loss part '") + name + "' is not finite");
}

}  // namespace

void LossWeights::validate() const {
  const std::pair<const char*, double> ws[] = {{"w_contr", contr}, {"w_decom", decom}, {"w_equ", equ}, {"w_inv", inv}};
  for (const auto& [name, v] : ws) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and >= 0, got " +
                                  std::to_string(v));
    }
  }
  if (!std::isfinite(temperature) || temperature <= 0.0) {
    throw std::invalid_argument("temperature must be > 0, got " + std::to_string(temperature));
  }
}

nlohmann::json LossReport::to_json() const {
  return {{"contr", contr}, {"decom", decom}, {"equ", equ},   {"inv", inv},         {"total", total},
          {"dice", dice},   {"wce", wce},     {"task", task}, {"clamped", clamped}};
}

Tensor contrastive_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives,
                        double temperature) {
  if (negatives.empty()) throw std::invalid_argument("contrastive_loss: need at least one negative");
  if (temperature <= 0.0) throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  require_unit(anchor, "anchor");
  require_unit(positive, "positive");
  for (const auto& n : negatives) require_unit(n, "negative");

  std::vector<Tensor> logits;
  logits.reserve(negatives.size() + 1);
  const double inv_t = 1.0 / temperature;
  logits.push_back(ag::scale(ag::dot(anchor, positive), inv_t));
  for (const auto& n : negatives) logits.push_back(ag::scale(ag::dot(anchor, n), inv_t));
  const Tensor l = ag::stack_scalars(logits);
  return ag::sub(ag::logsumexp(l), logits.front());
}

Tensor invariance_loss(const Tensor& fused, const Tensor& target) {
  require_same(fused, target, "invariance_loss");
  return ag::mse(fused, target);
}

Tensor sequential_mean_update(const Tensor& running, const Tensor& next) {
  if (!running.defined()) return next;
  require_same(running, next, "sequential_mean_update");
  return ag::scale(ag::add(running, next), 0.5);
}

void RunningMean::update(const Tensor& next) {
  if (count_ == 0) {
    value_ = next;
  } else if (exact_) {
    require_same(value_, next, "RunningMean");
    const double n = count_ + 1.0;
    value_ = ag::add(ag::scale(value_, count_ / n), ag::scale(next, 1.0 / n));
  } else {
    value_ = sequential_mean_update(value_, next);
  }
  ++count_;
}

Tensor equivariance_loss(const Tensor& probs, RotationTransform truth, bool* clamped) {
  if (probs.size() != 4) {
    throw std::invalid_argument("equivariance_loss: expected 4 rotation classes, got " +
                                ag::dims_str(probs.shape()));
  }
  const Tensor p = ag::pick(probs, static_cast<std::size_t>(truth.quarter_turns()));
  if (clamped && p.item() <= kLogFloor) *clamped = true;
  return ag::neg(ag::log(p, kLogFloor));
}

Tensor decomposition_loss(const Tensor& decoded, RotationTransform rotation, const Tensor& targets) {
  require_same(decoded, targets, "decomposition_loss");
  return ag::mse(ag::rotate_quarter(decoded, rotation.inverse().quarter_turns()), targets);
}

Tensor pretrain_loss(const Tensor& contr, const Tensor& decom, const Tensor& equ, const Tensor& inv,
                     const LossWeights& w) {
  w.validate();
  Tensor total = ag::scale(contr, w.contr);
  total = ag::add(total, ag::scale(decom, w.decom));
  total = ag::add(total, ag::scale(equ, w.equ));
  return ag::add(total, ag::scale(inv, w.inv));
}

double pretrain_loss(const LossReport& parts, const LossWeights& w) {
  w.validate();
  require_finite(parts.contr, "contr");
  require_finite(parts.decom, "decom");
  require_finite(parts.equ, "equ");
  require_finite(parts.inv, "inv");
  return w.contr * parts.contr + w.decom * parts.decom + w.equ * parts.equ + w.inv * parts.inv;
}

Tensor dice_loss(const Tensor& probs, const Tensor& labels) {
  require_same(probs, labels, "dice_loss");
  const Tensor inter = ag::sum(ag::mul(probs, labels));
  const Tensor num = ag::add_scalar(ag::scale(inter, 2.0), kDiceEps);
  const Tensor den = ag::add_scalar(ag::add(ag::sum(probs), ag::sum(labels)), kDiceEps);
  return ag::add_scalar(ag::neg(ag::div(num, den)), 1.0);
}

Tensor weighted_ce_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                        const std::vector<double>& class_weights, bool* clamped) {
  if (probs.shape().empty()) throw std::invalid_argument("weighted_ce_loss: probs must be [C, ...]");
  const int c = probs.dim(0);
  const std::size_t n = probs.size() / static_cast<std::size_t>(c);
  if (labels.size() != n) {
    throw std::invalid_argument("weighted_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " voxels");
  }
  if (class_weights.size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("weighted_ce_loss: need one weight per class");
  }
  const Tensor flat = ag::reshape(probs, {c, 1, 1, static_cast<int>(n)});
  Tensor total;
  for (int k = 0; k < c; ++k) {
    std::vector<double> mask(n, 0.0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] >= c) throw std::invalid_argument("weighted_ce_loss: label out of range");
      if (labels[i] == k) {
        mask[i] = class_weights[k];
        any = true;
        if (clamped && probs.data()[k * n + i] <= kLogFloor) *clamped = true;
      }
    }
    if (!any) continue;
    const Tensor pk = ag::select_channel(flat, k);
    const Tensor term = ag::sum(ag::mul(ag::log(pk, kLogFloor), Tensor::constant(pk.shape(), std::move(mask))));
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, -1.0 / static_cast<double>(n));
}

std::vector<double> inverse_frequency_weights(const std::vector<std::uint64_t>& counts) {
  std::vector<double> w(counts.size(), 0.0);
  double total = 0.0;
  int present = 0;
  for (auto c : counts) {
    total += static_cast<double>(c);
    present += c > 0;
  }
  if (present == 0) throw std::invalid_argument("inverse_frequency_weights: no labelled voxels");
  double s = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) {
      w[i] = total / static_cast<double>(counts[i]);
      s += w[i];
    }
  }
  for (auto& x : w) x *= present / s;
  return w;
}

Tensor transfer_loss(const Tensor& decoded, const Tensor& targets) {
  require_same(decoded, targets, "transfer_loss");
  // Sum of per-channel means equals C times the global mean.
  return ag::scale(ag::mse(decoded, targets), static_cast<double>(decoded.dim(0)));
}

Tensor downstream_loss(const Tensor& task, const Tensor& inv, double w_inv) {
  if (!std::isfinite(w_inv) || w_inv < 0.0) throw std::invalid_argument("downstream_loss: w_inv must be >= 0");
  return ag::add(task, ag::scale(inv, w_inv));
}

}  // namespace puir::losses

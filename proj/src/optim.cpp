#include "puir/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace puir::optim {

Adam::Adam(std::vector<std::pair<std::string, ag::Tensor>> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr >= 0.0)) throw std::invalid_argument("Adam: learning rate must be >= 0");
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    const auto& g = p.grad();
    if (g.empty()) continue;
    auto& x = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

std::vector<io::NamedArray> Adam::export_state() const {
  std::vector<io::NamedArray> out;
  out.push_back({"adam.t", {1}, {static_cast<double>(t_)}});
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& [name, p] = params_[k];
    out.push_back({"adam.m." + name, p.shape(), m_[k]});
    out.push_back({"adam.v." + name, p.shape(), v_[k]});
  }
  return out;
}

void Adam::import_state(const std::vector<io::NamedArray>& arrays) {
  auto find = [&](const std::string& n) -> const io::NamedArray& {
    for (const auto& a : arrays) {
      if (a.name == n) return a;
    }
    throw io::FormatError("optimizer state missing '" + n + "'");
  };
  t_ = static_cast<long>(find("adam.t").values.at(0));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& [name, p] = params_[k];
    const auto& m = find("adam.m." + name);
    const auto& v = find("adam.v." + name);
    if (m.values.size() != p.size() || v.values.size() != p.size()) {
      throw io::FormatError("optimizer state for '" + name + "' has the wrong size");
    }
    m_[k] = m.values;
    v_[k] = v.values;
  }
}

}  // namespace puir::optim

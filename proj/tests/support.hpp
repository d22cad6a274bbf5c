#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "puir/autograd.hpp"
#include "puir/rng.hpp"
#include "puir/volume.hpp"

namespace puir::test {

namespace fs = std::filesystem;

// Fresh empty directory under the build tree.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::path(PUIR_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline Volume random_volume(Shape3 s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Volume v(s);
  for (auto& x : v.data()) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

inline ag::Tensor random_tensor(ag::Dims shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ag::Tensor::constant(std::move(shape), std::move(v));
}

inline std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace puir::test

namespace puir::test {

// Largest |analytic - numeric| / max(1, |analytic|, |numeric|) over every
// entry of `params`, using central differences of step h.
template <class F>
double fd_error(std::vector<ag::Tensor> params, F&& f, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  ag::backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.mutable_grad());
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& vals = params[k].mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = f().item();
      vals[i] = keep - h;
      const double down = f().item();
      vals[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double scale = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / scale);
    }
  }
  return worst;
}

inline ag::Tensor random_parameter(ag::Dims shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  auto c = random_tensor(std::move(shape), seed, lo, hi);
  return ag::Tensor::parameter(c.shape(), c.data());
}

// Fixed random weighting that turns a tensor into a scalar with a generic gradient.
inline ag::Tensor probe(const ag::Tensor& t, std::uint64_t seed) {
  return ag::sum(ag::mul(t, random_tensor(t.shape(), seed)));
}

}  // namespace puir::test

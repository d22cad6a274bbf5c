#include <doctest.h>

#include <cmath>

#include "puir/losses.hpp"
#include "puir/phantom.hpp"
#include "support.hpp"

using namespace puir;
using namespace puir::losses;
using ag::Tensor;
using test::fd_error;

namespace {

Tensor vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::constant({n}, std::move(v));
}

Tensor unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  for (auto& x : v) x /= std::sqrt(n);
  return vec(std::move(v));
}

Tensor random_unit(int dim, std::uint64_t seed) {
  return unit(test::random_tensor({dim}, seed).data());
}

// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
std::vector<std::vector<double>> random_orthogonal(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> q;
  while (static_cast<int>(q.size()) < n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : q) {
      double d = 0.0;
      for (int i = 0; i < n; ++i) d += v[i] * u[i];
      for (int i = 0; i < n; ++i) v[i] -= d * u[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    q.push_back(v);
  }
  return q;
}

Tensor apply(const std::vector<std::vector<double>>& q, const Tensor& v) {
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) out[i] += q[i][j] * v.data()[j];
  return vec(out);
}

}  // namespace

TEST_CASE("contrastive_loss: equal similarities give ln(B + 1)") {
  // Orthonormal basis vectors: every similarity to the anchor is zero.
  const auto a = vec({1, 0, 0, 0, 0});
  const auto p = vec({0, 1, 0, 0, 0});
  const std::vector<Tensor> negs = {vec({0, 0, 1, 0, 0}), vec({0, 0, 0, 1, 0}), vec({0, 0, 0, 0, 1})};
  CHECK(contrastive_loss(a, p, negs, 0.5).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("contrastive_loss: two-term case") {
  const auto a = vec({1, 0});
  const std::vector<Tensor> negs = {vec({-1, 0})};
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0)));
  CHECK(expect == doctest::Approx(0.126928).epsilon(1e-6));
  CHECK(contrastive_loss(a, a, negs, 1.0).item() == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("contrastive_loss: approaches zero for aligned positive and opposite negatives") {
  const auto a = vec({1, 0});
  const std::vector<Tensor> negs = {vec({-1, 0}), vec({-1, 0})};
  double prev = 1e9;
  for (double t : {1.0, 0.3, 0.1}) {
    const double l = contrastive_loss(a, a, negs, t).item();
    CHECK(l > 0.0);
    CHECK(l < prev);
    prev = l;
  }
  const double small = contrastive_loss(a, a, negs, 0.03).item();
  CHECK(small >= 0.0);
  CHECK(small < 1e-12);
}

TEST_CASE("contrastive_loss: rejects non-normalized inputs") {
  const auto a = vec({1, 0});
  const std::vector<Tensor> negs = {vec({0, 1})};
  CHECK_THROWS_AS(contrastive_loss(vec({1.01, 0}), a, negs, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(contrastive_loss(a, a, std::vector<Tensor>{vec({0, 0.9})}, 0.5), std::invalid_argument);
  CHECK_NOTHROW(contrastive_loss(vec({1.0005, 0}), a, negs, 0.5));
}

TEST_CASE("contrastive_loss: invariant under a common orthogonal map") {
  const auto a = random_unit(6, 1), p = random_unit(6, 2);
  const std::vector<Tensor> negs = {random_unit(6, 3), random_unit(6, 4), random_unit(6, 5)};
  const auto q = random_orthogonal(6, 6);
  std::vector<Tensor> qnegs;
  for (const auto& n : negs) qnegs.push_back(apply(q, n));
  const double base = contrastive_loss(a, p, negs, 0.5).item();
  CHECK(std::abs(contrastive_loss(apply(q, a), apply(q, p), qnegs, 0.5).item() - base) < 1e-9);
}

TEST_CASE("invariance_loss: zero, constant offset, elementwise oracle") {
  const auto a = test::random_tensor({2, 2, 2, 2}, 7);
  CHECK(invariance_loss(a, a).item() == 0.0);
  CHECK(invariance_loss(a, ag::add_scalar(a, 0.3)).item() == doctest::Approx(0.09).epsilon(1e-12));
  const auto b = test::random_tensor({2, 2, 2, 2}, 8);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  CHECK(invariance_loss(a, b).item() == doctest::Approx(acc / a.size()).epsilon(1e-14));
  CHECK_THROWS_AS(invariance_loss(a, test::random_tensor({2, 2, 2, 1}, 9)), std::invalid_argument);
}

TEST_CASE("invariance_loss: gradient reaches both arguments") {
  auto a = test::random_parameter({2, 2, 2, 2}, 10);
  auto b = test::random_parameter({2, 2, 2, 2}, 11);
  ag::backward(invariance_loss(a, b));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(-b.grad()[i]));
  CHECK(fd_error({a, b}, [&] { return invariance_loss(a, b); }) < 1e-8);
}

TEST_CASE("sequential_mean_update: empty, two entries, three-entry bias") {
  const auto a = test::random_tensor({2, 2, 2, 2}, 12);
  const auto b = test::random_tensor({2, 2, 2, 2}, 13);
  CHECK(sequential_mean_update(Tensor(), a).data() == a.data());
  const auto two = sequential_mean_update(sequential_mean_update(Tensor(), a), b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(two.data()[i] - (a.data()[i] + b.data()[i]) / 2) <= 1e-12);
  }
  Tensor run;
  RunningMean exact(true);
  for (double x : {0.0, 0.0, 12.0}) {
    run = sequential_mean_update(run, Tensor::scalar(x));
    exact.update(Tensor::scalar(x));
  }
  CHECK(run.item() == 6.0);
  CHECK(exact.value().item() == doctest::Approx(4.0).epsilon(1e-15));
  CHECK_THROWS_AS(sequential_mean_update(a, Tensor::scalar(1.0)), std::invalid_argument);
}

TEST_CASE("RunningMean: pairwise halving weights") {
  RunningMean seq;
  const double xs[] = {1.0, 2.0, 4.0, 8.0};
  for (double x : xs) seq.update(Tensor::scalar(x));
  // Weights 1/8, 1/8, 1/4, 1/2 for four entries.
  CHECK(seq.value().item() == doctest::Approx(1.0 / 8 + 2.0 / 8 + 4.0 / 4 + 8.0 / 2).epsilon(1e-15));
  CHECK(seq.count() == 4);
}

TEST_CASE("equivariance_loss: one-hot, uniform, direct log, clamp flag") {
  bool clamped = false;
  CHECK(equivariance_loss(vec({0, 1, 0, 0}), RotationTransform(1), &clamped).item() == 0.0);
  CHECK_FALSE(clamped);
  CHECK(equivariance_loss(vec({0.25, 0.25, 0.25, 0.25}), RotationTransform(2)).item() ==
        doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(equivariance_loss(vec({0.7, 0.1, 0.1, 0.1}), RotationTransform(0)).item() ==
        doctest::Approx(0.356675).epsilon(1e-6));
  const double l = equivariance_loss(vec({1, 0, 0, 0}), RotationTransform(3), &clamped).item();
  CHECK(clamped);
  CHECK(l == doctest::Approx(-std::log(kLogFloor)));
}

TEST_CASE("decomposition_loss: perfect fit, offset, inverse permutation oracle") {
  const auto targets = test::random_tensor({2, 2, 2, 2}, 14);
  for (int k = 0; k < 4; ++k) {
    const auto decoded = ag::rotate_quarter(targets, k);
    CHECK(decomposition_loss(decoded, RotationTransform(k), targets).item() == 0.0);
  }
  CHECK(decomposition_loss(ag::add_scalar(targets, 1.0), RotationTransform(0), targets).item() ==
        doctest::Approx(1.0).epsilon(1e-14));

  // Undo one quarter turn by hand: rotating back by three turns sends
  // decoded[c, d, h, w] to out[c, d, w, 1 - h] on a 2x2 plane.
  const auto decoded = test::random_tensor({2, 2, 2, 2}, 15);
  double acc = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int d = 0; d < 2; ++d)
      for (int h = 0; h < 2; ++h)
        for (int w = 0; w < 2; ++w) {
          const double back = decoded.data()[((c * 2 + d) * 2 + h) * 2 + w];
          const double t = targets.data()[((c * 2 + d) * 2 + w) * 2 + (1 - h)];
          acc += (back - t) * (back - t);
        }
  CHECK(decomposition_loss(decoded, RotationTransform(1), targets).item() == doctest::Approx(acc / 16).epsilon(1e-14));
  CHECK_THROWS_AS(decomposition_loss(decoded, RotationTransform(1), test::random_tensor({1, 2, 2, 2}, 16)),
                  std::invalid_argument);
}

TEST_CASE("pretrain_loss: weighted sum and weight validation") {
  LossReport parts;
  parts.contr = 1;
  parts.decom = 2;
  parts.equ = 3;
  parts.inv = 4;
  CHECK(pretrain_loss(parts, LossWeights{}) == 10.0);
  LossWeights no_inv;
  no_inv.inv = 0.0;
  CHECK(pretrain_loss(parts, no_inv) == 6.0);
  CHECK(pretrain_loss(LossReport{}, LossWeights{}) == 0.0);
  const auto t = pretrain_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), Tensor::scalar(4), no_inv);
  CHECK(t.item() == 6.0);
  LossWeights bad;
  bad.equ = -1.0;
  CHECK_THROWS_AS(pretrain_loss(parts, bad), std::invalid_argument);
  bad = {};
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("dice_loss: perfect, empty prediction, half probabilities") {
  const auto labels = vec({1, 0, 1, 1, 0, 0, 1, 0});
  CHECK(dice_loss(labels, labels).item() == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  const auto ones = Tensor::constant({8}, 1.0);
  CHECK(dice_loss(Tensor::constant({8}, 0.0), ones).item() == doctest::Approx(1.0 - kDiceEps / (8 + kDiceEps)).epsilon(1e-15));
  const double expect = 1.0 - (2.0 * 2.0 + kDiceEps) / (4.0 + 4.0 + kDiceEps);
  CHECK(dice_loss(Tensor::constant({8}, 0.5), labels).item() == doctest::Approx(expect).epsilon(1e-15));
  CHECK(expect == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("weighted_ce_loss: perfect, uniform, weighted class") {
  const std::vector<std::uint8_t> labels = {0, 1, 1, 0};
  const auto perfect = Tensor::constant({2, 4}, std::vector<double>{1, 0, 0, 1, 0, 1, 1, 0});
  CHECK(weighted_ce_loss(perfect, labels, {1, 1}).item() == 0.0);
  const auto half = Tensor::constant({2, 4}, 0.5);
  CHECK(weighted_ce_loss(half, labels, {1, 1}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(weighted_ce_loss(half, {1, 1, 1, 1}, {1, 3}).item() == doctest::Approx(3 * std::log(2.0)).epsilon(1e-15));
  bool clamped = false;
  const auto wrong = Tensor::constant({2, 4}, std::vector<double>{0, 1, 1, 0, 1, 0, 0, 1});
  weighted_ce_loss(wrong, labels, {1, 1}, &clamped);
  CHECK(clamped);
}

TEST_CASE("inverse_frequency_weights: mean one over present classes") {
  const auto w = inverse_frequency_weights({90, 10});
  CHECK(w[1] / w[0] == doctest::Approx(9.0));
  CHECK((w[0] + w[1]) / 2 == doctest::Approx(1.0));
  const auto absent = inverse_frequency_weights({10, 0});
  CHECK(absent[0] == doctest::Approx(1.0));
}

TEST_CASE("transfer_loss and downstream_loss") {
  const auto d = test::random_tensor({3, 2, 2, 2}, 17);
  const auto t = test::random_tensor({3, 2, 2, 2}, 18);
  double acc = 0.0;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (int i = 0; i < 8; ++i) s += std::pow(d.data()[c * 8 + i] - t.data()[c * 8 + i], 2);
    acc += s / 8;
  }
  CHECK(transfer_loss(d, t).item() == doctest::Approx(acc).epsilon(1e-14));
  CHECK(downstream_loss(Tensor::scalar(0.3), Tensor::scalar(0.2), 1.0).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(downstream_loss(Tensor::scalar(0.3), Tensor::scalar(0.2), 0.0).item() == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("losses are non-negative on random inputs") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = random_unit(4, 100 + s), p = random_unit(4, 200 + s), n = random_unit(4, 300 + s);
    CHECK(contrastive_loss(a, p, std::vector<Tensor>{n}, 0.5).item() >= 0.0);
    const auto x = test::random_tensor({2, 2, 2, 2}, 400 + s), y = test::random_tensor({2, 2, 2, 2}, 500 + s);
    CHECK(invariance_loss(x, y).item() >= 0.0);
    CHECK(decomposition_loss(x, RotationTransform(int(s % 4)), y).item() >= 0.0);
    const auto probs = ag::softmax(test::random_tensor({4}, 600 + s));
    CHECK(equivariance_loss(probs, RotationTransform(int(s % 4))).item() >= 0.0);
    const auto fg = test::random_tensor({8}, 700 + s, 0, 1);
    CHECK(dice_loss(fg, vec({1, 0, 0, 1, 1, 0, 1, 0})).item() >= 0.0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  auto a = test::random_parameter({5}, 19), p = test::random_parameter({5}, 20), n = test::random_parameter({5}, 21);
  CHECK(fd_error({a, p, n}, [&] {
          const std::vector<Tensor> negs = {ag::l2_normalize(n)};
          return contrastive_loss(ag::l2_normalize(a), ag::l2_normalize(p), negs, 0.5);
        }) < 1e-7);
  auto logits = test::random_parameter({4}, 22);
  CHECK(fd_error({logits}, [&] { return equivariance_loss(ag::softmax(logits), RotationTransform(2)); }) < 1e-7);
  auto d = test::random_parameter({2, 2, 2, 2}, 23), t = test::random_parameter({2, 2, 2, 2}, 24);
  CHECK(fd_error({d, t}, [&] { return decomposition_loss(d, RotationTransform(3), t); }) < 1e-7);
  CHECK(fd_error({d, t}, [&] { return transfer_loss(d, t); }) < 1e-7);
  auto fg = test::random_parameter({8}, 25, 0.1, 0.9);
  const auto labels = vec({1, 0, 0, 1, 1, 0, 1, 0});
  CHECK(fd_error({fg}, [&] { return dice_loss(fg, labels); }) < 1e-7);
  auto scores = test::random_parameter({2, 2, 2, 2}, 26);
  const std::vector<std::uint8_t> cls = {0, 1, 1, 0, 1, 0, 0, 1};
  CHECK(fd_error({scores}, [&] { return weighted_ce_loss(ag::softmax_channels(scores), cls, {0.6, 1.4}); }) < 1e-7);
}

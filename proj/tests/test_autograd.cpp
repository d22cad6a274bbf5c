#include <doctest.h>

#include <cmath>

#include "puir/autograd.hpp"
#include "puir/phantom.hpp"
#include "support.hpp"

using namespace puir;
using ag::Tensor;
using test::fd_error;
using test::probe;
using test::random_parameter;

namespace {

// Direct 3D convolution with zero padding, [Cout, Cin, k, k, k] weights.
std::vector<double> naive_conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int ci = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  const int od = (D + 2 * pad - k) / stride + 1, oh = (H + 2 * pad - k) / stride + 1,
            ow = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out;
  for (int o = 0; o < co; ++o)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int q = 0; q < ow; ++q) {
          double acc = b.data()[o];
          for (int c = 0; c < ci; ++c)
            for (int a = 0; a < k; ++a)
              for (int e = 0; e < k; ++e)
                for (int f = 0; f < k; ++f) {
                  const int sd = z * stride - pad + a, sh = y * stride - pad + e, sw = q * stride - pad + f;
                  if (sd < 0 || sh < 0 || sw < 0 || sd >= D || sh >= H || sw >= W) continue;
                  acc += w.data()[(((o * ci + c) * k + a) * k + e) * k + f] *
                         x.data()[((c * D + sd) * H + sh) * W + sw];
                }
          out.push_back(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv3d matches a direct convolution") {
  const auto x = test::random_tensor({2, 5, 4, 4}, 1);
  const auto w = test::random_tensor({3, 2, 3, 3, 3}, 2);
  const auto b = test::random_tensor({3}, 3);
  for (int stride : {1, 2}) {
    const auto y = ag::conv3d(x, w, b, stride, 1);
    const auto ref = naive_conv3d(x, w, b, stride, 1);
    REQUIRE(y.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv3d gradients match finite differences") {
  auto x = random_parameter({2, 4, 4, 4}, 4);
  auto w = random_parameter({2, 2, 3, 3, 3}, 5);
  auto b = random_parameter({2}, 6);
  for (int stride : {1, 2}) {
    CHECK(fd_error({x, w, b}, [&] { return probe(ag::conv3d(x, w, b, stride, 1), 7); }) < 1e-6);
  }
  auto w1 = random_parameter({3, 2, 1, 1, 1}, 8);
  auto b1 = random_parameter({3}, 9);
  CHECK(fd_error({x, w1, b1}, [&] { return probe(ag::conv3d(x, w1, b1, 1, 0), 10); }) < 1e-6);
}

TEST_CASE("elementwise ops and reductions have correct gradients") {
  auto a = random_parameter({2, 3}, 11, 0.2, 1.5);
  auto c = random_parameter({2, 3}, 12, 0.2, 1.5);
  auto s = random_parameter({}, 13, 0.5, 1.0);
  CHECK(fd_error({a, c}, [&] { return probe(ag::div(ag::mul(a, c), ag::add(a, c)), 1); }) < 1e-6);
  CHECK(fd_error({a, s}, [&] { return probe(ag::sub(ag::mul(a, s), s), 2); }) < 1e-6);
  CHECK(fd_error({a}, [&] { return probe(ag::log(ag::exp(ag::silu(a))), 3); }) < 1e-6);
  CHECK(fd_error({a, c}, [&] { return ag::mse(ag::square(a), c); }) < 1e-6);
  CHECK(fd_error({a, c}, [&] { return ag::dot(a, c); }) < 1e-6);
}

TEST_CASE("vector ops have correct gradients and values") {
  auto v = random_parameter({5}, 14);
  CHECK(fd_error({v}, [&] { return probe(ag::softmax(v), 4); }) < 1e-6);
  CHECK(fd_error({v}, [&] { return probe(ag::l2_normalize(v), 5); }) < 1e-6);
  CHECK(fd_error({v}, [&] { return ag::logsumexp(v); }) < 1e-6);

  double m = -1e300, total = 0.0;
  for (double x : v.data()) m = std::max(m, x);
  for (double x : v.data()) total += std::exp(x - m);
  CHECK(ag::logsumexp(v).item() == doctest::Approx(m + std::log(total)).epsilon(1e-14));
  const auto sm = ag::softmax(v);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(sm.data()[i] == doctest::Approx(std::exp(v.data()[i] - m) / total).epsilon(1e-14));
  }
  auto w = random_parameter({3, 5}, 15);
  auto b = random_parameter({3}, 16);
  CHECK(fd_error({v, w, b}, [&] { return probe(ag::linear(v, w, b), 6); }) < 1e-6);
}

TEST_CASE("volumetric ops have correct gradients") {
  auto x = random_parameter({2, 2, 4, 4}, 17);
  CHECK(fd_error({x}, [&] { return probe(ag::upsample_nearest2(x), 1); }) < 1e-6);
  CHECK(fd_error({x}, [&] { return probe(ag::upsample_linear2(x), 2); }) < 1e-6);
  CHECK(fd_error({x}, [&] { return probe(ag::softmax_channels(x), 3); }) < 1e-6);
  CHECK(fd_error({x}, [&] { return probe(ag::global_avg_pool(x), 4); }) < 1e-6);
  CHECK(fd_error({x}, [&] { return probe(ag::rotate_quarter(x, 1), 5); }) < 1e-6);
  auto y = random_parameter({1, 2, 4, 4}, 18);
  CHECK(fd_error({x, y}, [&] { return probe(ag::concat_channels(x, y), 6); }) < 1e-6);
  CHECK(fd_error({x}, [&] { return probe(ag::select_channel(x, 1), 7); }) < 1e-6);
  auto slots = random_parameter({3, 2}, 19);
  CHECK(fd_error({x, slots}, [&] { return probe(ag::attend_slots(x, slots), 8); }) < 1e-6);
}

TEST_CASE("upsample_linear2 keeps constants and doubles every axis") {
  const auto x = Tensor::constant({1, 2, 3, 3}, 2.5);
  const auto y = ag::upsample_linear2(x);
  CHECK(y.shape() == ag::Dims{1, 4, 6, 6});
  for (double v : y.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("rotate_quarter agrees with apply_rotation") {
  const auto v = test::random_volume({3, 4, 4}, 20);
  std::vector<double> vals(v.data().begin(), v.data().end());
  const auto t = Tensor::constant({1, 3, 4, 4}, vals);
  for (int k = 0; k < 4; ++k) {
    const auto r = ag::rotate_quarter(t, k);
    const auto ref = phantom::apply_rotation(v, RotationTransform(k));
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(r.data()[i] == double(ref[i]));
  }
}

TEST_CASE("NoGradGuard suppresses history") {
  auto p = random_parameter({3}, 21);
  {
    ag::NoGradGuard guard;
    const auto y = ag::scale(p, 2.0);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
  CHECK(ag::scale(p, 2.0).requires_grad());
}

TEST_CASE("shape mismatches are rejected") {
  const auto a = Tensor::constant({2, 3}, 1.0);
  const auto b = Tensor::constant({3, 2}, 1.0);
  CHECK_THROWS(ag::add(a, b));
  CHECK_THROWS(ag::mse(a, b));
  CHECK_NOTHROW(ag::add(a, Tensor::scalar(1.0)));
}

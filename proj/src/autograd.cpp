#include "puir/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "puir/rotation.hpp"

namespace puir::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

// Eigen picks its vectorized summation order from the operand addresses, so
// matrix products run on Eigen-owned copies to keep results bitwise reproducible.
RowMat owned(const double* p, Eigen::Index rows, Eigen::Index cols) { return CMapMat(p, rows, cols); }

void add_into(double* dst, const RowMat& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

using Parents = std::vector<std::shared_ptr<Node>>;

thread_local bool g_grad_enabled = true;

bool any_requires_grad(const Parents& parents) {
  if (!g_grad_enabled) return false;
  return std::any_of(parents.begin(), parents.end(),
                     [](const auto& p) { return p->requires_grad; });
}

/// Creates an op result. History is recorded only when some parent needs it.
Tensor make_result(Dims shape, std::vector<double> value, Parents parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (any_requires_grad(parents)) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + dims_str(a.shape()) +
                                " vs " + dims_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + dims_str(a.shape()));
  }
}

struct Spatial {
  int c, d, h, w;
  std::size_t n() const { return static_cast<std::size_t>(d) * h * w; }
};

Spatial spatial_of(const Tensor& x, const char* op) {
  require_rank(x, 4, op);
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

enum class Broadcast { kNone, kLeft, kRight };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.size() == 1) return Broadcast::kLeft;
  if (b.size() == 1) return Broadcast::kRight;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + dims_str(a.shape()) +
                              " and " + dims_str(b.shape()));
}

/// Generic binary elementwise op with optional scalar broadcast. `f` gives the
/// value, `dfa`/`dfb` the partials at (a, b).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA dfa, DB dfb) {
  const Broadcast kind = broadcast_kind(a, b, name);
  const Dims shape = kind == Broadcast::kLeft ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto ai = [&](std::size_t i) { return kind == Broadcast::kLeft ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return kind == Broadcast::kRight ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ai(i), bi(i));
  auto an = a.node();
  auto bn = b.node();
  return make_result(shape, std::move(out), {an, bn}, [an, bn, kind, dfa, dfb](Node& self) {
    const auto& av = an->value;
    const auto& bv = bn->value;
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = kind == Broadcast::kLeft ? av[0] : av[i];
      const double y = kind == Broadcast::kRight ? bv[0] : bv[i];
      const double g = self.grad[i];
      if (an->requires_grad) an->grad_buffer()[kind == Broadcast::kLeft ? 0 : i] += g * dfa(x, y);
      if (bn->requires_grad) bn->grad_buffer()[kind == Broadcast::kRight ? 0 : i] += g * dfb(x, y);
    }
  });
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, df](Node& self) {
    auto& g = an->grad_buffer();
    const auto& av = an->value;
    for (std::size_t i = 0; i < av.size(); ++i) g[i] += self.grad[i] * df(av[i], self.value[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

std::size_t numel(const Dims& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string dims_str(const Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

Tensor Tensor::constant(Dims shape, std::vector<double> values) {
  if (values.size() != numel(shape)) {
    throw std::invalid_argument("Tensor::constant: " + std::to_string(values.size()) +
                                " values for shape " + dims_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::constant(Dims shape, double fill) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, fill));
}

Tensor Tensor::parameter(Dims shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on tensor of shape " + dims_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return constant(shape(), data()); }

void backward(const Tensor& output) {
  if (output.size() != 1) throw std::invalid_argument("backward: output must be a scalar");
  if (!output.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.node().get(), 0}};
  visited.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  output.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a, double floor) {
  return unary(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sum(const Tensor& a) {
  const auto& av = a.data();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  auto an = a.node();
  return make_result({}, {s}, {an}, [an](Node& self) {
    auto& g = an->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::size_t n = av.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result({}, {s / static_cast<double>(n)}, {an, bn}, [an, bn](Node& self) {
    const std::size_t n = an->value.size();
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = k * (an->value[i] - bn->value[i]);
      if (an->requires_grad) an->grad_buffer()[i] += d;
      if (bn->requires_grad) bn->grad_buffer()[i] -= d;
    }
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_result({}, {s}, {an, bn}, [an, bn](Node& self) {
    const double g = self.grad[0];
    for (std::size_t i = 0; i < an->value.size(); ++i) {
      if (an->requires_grad) an->grad_buffer()[i] += g * bn->value[i];
      if (bn->requires_grad) bn->grad_buffer()[i] += g * an->value[i];
    }
  });
}

Tensor reshape(const Tensor& a, Dims shape) {
  if (numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: " + dims_str(a.shape()) + " -> " + dims_str(shape));
  }
  auto an = a.node();
  return make_result(std::move(shape), a.data(), {an}, [an](Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor stack_scalars(std::span<const Tensor> parts) {
  Parents parents;
  std::vector<double> out;
  for (const auto& p : parts) {
    out.push_back(p.item());
    parents.push_back(p.node());
  }
  const int n = static_cast<int>(out.size());
  return make_result({n}, std::move(out), parents, [parents](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (parents[i]->requires_grad) parents[i]->grad_buffer()[0] += self.grad[i];
    }
  });
}

Tensor pick(const Tensor& v, std::size_t index) {
  if (index >= v.size()) throw std::out_of_range("pick: index out of range");
  auto vn = v.node();
  return make_result({}, {v.data()[index]}, {vn}, [vn, index](Node& self) {
    vn->grad_buffer()[index] += self.grad[0];
  });
}

Tensor logsumexp(const Tensor& v) {
  const auto& x = v.data();
  if (x.empty()) throw std::invalid_argument("logsumexp of empty tensor");
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double xi : x) s += std::exp(xi - m);
  const double out = m + std::log(s);
  auto vn = v.node();
  return make_result({}, {out}, {vn}, [vn](Node& self) {
    auto& g = vn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[0] * std::exp(vn->value[i] - self.value[0]);
    }
  });
}

Tensor softmax(const Tensor& v) {
  const auto& x = v.data();
  if (x.empty()) throw std::invalid_argument("softmax of empty tensor");
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += out[i] = std::exp(x[i] - m);
  for (auto& o : out) o /= s;
  auto vn = v.node();
  return make_result(v.shape(), std::move(out), {vn}, [vn](Node& self) {
    const auto& p = self.value;
    double inner = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) inner += self.grad[i] * p[i];
    auto& g = vn->grad_buffer();
    for (std::size_t i = 0; i < p.size(); ++i) g[i] += p[i] * (self.grad[i] - inner);
  });
}

Tensor l2_normalize(const Tensor& v) {
  double ss = 0.0;
  for (double x : v.data()) ss += x * x;
  const double norm = std::sqrt(ss);
  if (!(norm > 1e-12)) {
    throw std::domain_error("l2_normalize: degenerate zero-norm embedding");
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v.data()[i] / norm;
  auto vn = v.node();
  return make_result(v.shape(), std::move(out), {vn}, [vn, norm](Node& self) {
    const auto& u = self.value;
    double inner = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) inner += self.grad[i] * u[i];
    auto& g = vn->grad_buffer();
    for (std::size_t i = 0; i < u.size(); ++i) g[i] += (self.grad[i] - u[i] * inner) / norm;
  });
}

namespace {

struct ConvGeom {
  Spatial in;
  int out_c, k, stride, pad;
  int od, oh, ow;
  std::size_t on() const { return static_cast<std::size_t>(od) * oh * ow; }
  std::size_t rows() const { return static_cast<std::size_t>(in.c) * k * k * k; }
};

/// Output positions [lo, hi) along one axis whose input tap `kk` lands inside [0, n).
std::pair<int, int> valid_range(int out_n, int n, int stride, int pad, int kk) {
  int lo = 0;
  while (lo < out_n && lo * stride - pad + kk < 0) ++lo;
  int hi = out_n;
  while (hi > lo && (hi - 1) * stride - pad + kk >= n) --hi;
  return {lo, hi};
}

/// Gathers (or scatter-adds, for the adjoint) the columns of output depth
/// slices [od0, od1) between the input volume and a rows x slab column matrix.
template <bool kScatter>
void unfold(const ConvGeom& g, int od0, int od1, const double* x_in, double* x_out, const double* col_in,
            double* col_out) {
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t on = plane * (od1 - od0);
  const int k = g.k;
  for (int c = 0; c < g.in.c; ++c) {
    const std::size_t xoff = static_cast<std::size_t>(c) * g.in.n();
    for (int kd = 0; kd < k; ++kd) {
      auto [d_lo, d_hi] = valid_range(g.od, g.in.d, g.stride, g.pad, kd);
      d_lo = std::max(d_lo, od0);
      d_hi = std::max(d_lo, std::min(d_hi, od1));
      for (int kh = 0; kh < k; ++kh) {
        const auto [h_lo, h_hi] = valid_range(g.oh, g.in.h, g.stride, g.pad, kh);
        for (int kw = 0; kw < k; ++kw) {
          const auto [w_lo, w_hi] = valid_range(g.ow, g.in.w, g.stride, g.pad, kw);
          const std::size_t row = ((static_cast<std::size_t>(c) * k + kd) * k + kh) * k + kw;
          if constexpr (!kScatter) {
            double* dst = col_out + row * on;
            if (d_lo > od0 || d_hi < od1 || h_lo > 0 || h_hi < g.oh || w_lo > 0 || w_hi < g.ow) {
              std::fill(dst, dst + on, 0.0);
            }
          }
          for (int od = d_lo; od < d_hi; ++od) {
            const int id = od * g.stride - g.pad + kd;
            for (int oh = h_lo; oh < h_hi; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              const std::size_t xrow = xoff + (static_cast<std::size_t>(id) * g.in.h + ih) * g.in.w - g.pad + kw;
              const std::size_t crow = row * on + (od - od0) * plane + static_cast<std::size_t>(oh) * g.ow;
              if constexpr (kScatter) {
                double* dst = x_out + xrow;
                const double* src = col_in + crow;
                if (g.stride == 1) {
                  for (int ow = w_lo; ow < w_hi; ++ow) dst[ow] += src[ow];
                } else {
                  for (int ow = w_lo; ow < w_hi; ++ow) dst[ow * g.stride] += src[ow];
                }
              } else {
                const double* src = x_in + xrow;
                double* dst = col_out + crow;
                if (g.stride == 1) {
                  for (int ow = w_lo; ow < w_hi; ++ow) dst[ow] = src[ow];
                } else {
                  for (int ow = w_lo; ow < w_hi; ++ow) dst[ow] = src[ow * g.stride];
                }
              }
            }
          }
        }
      }
    }
  }
}

void im2col(const ConvGeom& g, int od0, int od1, const double* x, double* col) {
  unfold<false>(g, od0, od1, x, nullptr, nullptr, col);
}

void col2im(const ConvGeom& g, int od0, int od1, const double* col, double* dx) {
  unfold<true>(g, od0, od1, nullptr, dx, col, nullptr);
}

/// Depth slices per im2col slab, sized so one slab stays cache resident.
int slab_depth(const ConvGeom& g) {
  constexpr std::size_t kSlabBytes = 512 * 1024;
  const std::size_t per_slice = g.rows() * static_cast<std::size_t>(g.oh) * g.ow * sizeof(double);
  return static_cast<int>(std::clamp<std::size_t>(kSlabBytes / std::max<std::size_t>(per_slice, 1), 1, g.od));
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  const Spatial in = spatial_of(x, "conv3d");
  require_rank(weight, 5, "conv3d weight");
  const int out_c = weight.dim(0);
  const int k = weight.dim(2);
  if (weight.dim(1) != in.c || weight.dim(3) != k || weight.dim(4) != k) {
    throw std::invalid_argument("conv3d: weight " + dims_str(weight.shape()) +
                                " incompatible with input " + dims_str(x.shape()));
  }
  if (bias.size() != static_cast<std::size_t>(out_c)) {
    throw std::invalid_argument("conv3d: bias size mismatch");
  }
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv3d: bad stride/pad");
  ConvGeom g{in, out_c, k, stride, pad, 0, 0, 0};
  g.od = (in.d + 2 * pad - k) / stride + 1;
  g.oh = (in.h + 2 * pad - k) / stride + 1;
  g.ow = (in.w + 2 * pad - k) / stride + 1;
  if (g.od <= 0 || g.oh <= 0 || g.ow <= 0) throw std::invalid_argument("conv3d: empty output");

  const std::size_t on = g.on();
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const auto rows = static_cast<Eigen::Index>(g.rows());
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  const int slab = slab_depth(g);

  RowMat o(out_c, static_cast<Eigen::Index>(on));
  const RowMat w = owned(weight.data().data(), out_c, rows);
  if (pointwise) {
    o.noalias() = w * owned(x.data().data(), rows, static_cast<Eigen::Index>(on));
  } else {
    RowMat col(rows, static_cast<Eigen::Index>(plane * slab));
    for (int d0 = 0; d0 < g.od; d0 += slab) {
      const int d1 = std::min(g.od, d0 + slab);
      const auto n = static_cast<Eigen::Index>(plane * (d1 - d0));
      im2col(g, d0, d1, x.data().data(), col.data());
      if (n == col.cols()) {
        o.middleCols(static_cast<Eigen::Index>(plane * d0), n).noalias() = w * col;
      } else {
        o.middleCols(static_cast<Eigen::Index>(plane * d0), n).noalias() = w * owned(col.data(), rows, n);
      }
    }
  }
  for (int c = 0; c < out_c; ++c) o.row(c).array() += bias.data()[c];
  std::vector<double> out(o.data(), o.data() + o.size());

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.node();
  return make_result({out_c, g.od, g.oh, g.ow}, std::move(out), {xn, wn, bn},
                     [xn, wn, bn, g, pointwise, slab, plane](Node& self) {
                       const auto rows = static_cast<Eigen::Index>(g.rows());
                       const auto cols = static_cast<Eigen::Index>(g.on());
                       const RowMat dout = owned(self.grad.data(), g.out_c, cols);
                       const RowMat w = owned(wn->value.data(), g.out_c, rows);
                       if (bn->requires_grad) {
                         auto& gb = bn->grad_buffer();
                         for (int c = 0; c < g.out_c; ++c) gb[c] += dout.row(c).sum();
                       }
                       if (pointwise) {
                         if (wn->requires_grad) {
                           const RowMat xm = owned(xn->value.data(), rows, cols);
                           add_into(wn->grad_buffer().data(), dout * xm.transpose());
                         }
                         if (xn->requires_grad) add_into(xn->grad_buffer().data(), w.transpose() * dout);
                         return;
                       }
                       if (!wn->requires_grad && !xn->requires_grad) return;
                       RowMat col(rows, static_cast<Eigen::Index>(plane * slab));
                       RowMat gw = RowMat::Zero(g.out_c, rows);
                       for (int d0 = 0; d0 < g.od; d0 += slab) {
                         const int d1 = std::min(g.od, d0 + slab);
                         const auto n = static_cast<Eigen::Index>(plane * (d1 - d0));
                         const RowMat dslab = dout.middleCols(static_cast<Eigen::Index>(plane * d0), n);
                         if (wn->requires_grad) {
                           im2col(g, d0, d1, xn->value.data(), col.data());
                           gw.noalias() += dslab * owned(col.data(), rows, n).transpose();
                         }
                         if (xn->requires_grad) {
                           const RowMat cm = w.transpose() * dslab;
                           col2im(g, d0, d1, cm.data(), xn->grad_buffer().data());
                         }
                       }
                       if (wn->requires_grad) add_into(wn->grad_buffer().data(), gw);
                     });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Spatial sa = spatial_of(a, "concat_channels");
  const Spatial sb = spatial_of(b, "concat_channels");
  if (sa.d != sb.d || sa.h != sb.h || sa.w != sb.w) {
    throw std::invalid_argument("concat_channels: spatial mismatch " + dims_str(a.shape()) +
                                " vs " + dims_str(b.shape()));
  }
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node();
  auto bn = b.node();
  return make_result({sa.c + sb.c, sa.d, sa.h, sa.w}, std::move(out), {an, bn},
                     [an, bn](Node& self) {
                       const std::size_t na = an->value.size();
                       if (an->requires_grad) {
                         auto& g = an->grad_buffer();
                         for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                       }
                       if (bn->requires_grad) {
                         auto& g = bn->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
                       }
                     });
}

Tensor select_channel(const Tensor& x, int c) {
  const Spatial s = spatial_of(x, "select_channel");
  if (c < 0 || c >= s.c) throw std::out_of_range("select_channel: channel out of range");
  const std::size_t n = s.n();
  std::vector<double> out(x.data().begin() + c * n, x.data().begin() + (c + 1) * n);
  auto xn = x.node();
  return make_result({1, s.d, s.h, s.w}, std::move(out), {xn}, [xn, c, n](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[c * n + i] += self.grad[i];
  });
}

Tensor stack_channels(std::span<const Tensor> channels) {
  if (channels.empty()) throw std::invalid_argument("stack_channels: empty");
  const Spatial s0 = spatial_of(channels[0], "stack_channels");
  Parents parents;
  std::vector<double> out;
  int total = 0;
  for (const auto& t : channels) {
    const Spatial s = spatial_of(t, "stack_channels");
    if (s.d != s0.d || s.h != s0.h || s.w != s0.w) {
      throw std::invalid_argument("stack_channels: spatial mismatch");
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
    parents.push_back(t.node());
    total += s.c;
  }
  return make_result({total, s0.d, s0.h, s0.w}, std::move(out), parents, [parents](Node& self) {
    std::size_t off = 0;
    for (const auto& p : parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Tensor upsample_nearest2(const Tensor& x) {
  const Spatial s = spatial_of(x, "upsample_nearest2");
  const int D = 2 * s.d, H = 2 * s.h, W = 2 * s.w;
  std::vector<std::size_t> src(static_cast<std::size_t>(s.c) * D * H * W);
  std::size_t o = 0;
  for (int c = 0; c < s.c; ++c)
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w, ++o)
          src[o] = ((static_cast<std::size_t>(c) * s.d + d / 2) * s.h + h / 2) * s.w + w / 2;
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.data()[src[i]];
  auto xn = x.node();
  return make_result({s.c, D, H, W}, std::move(out), {xn},
                     [xn, src = std::move(src)](Node& self) {
                       auto& g = xn->grad_buffer();
                       for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                     });
}

namespace {

/// Doubles one axis (1 = d, 2 = h, 3 = w) with linear interpolation at
/// half-pixel centres, clamping at the borders.
Tensor upsample_linear_axis(const Tensor& x, int axis) {
  const Spatial s = spatial_of(x, "upsample_linear2");
  Dims shape = x.shape();
  const int len = shape[axis];
  shape[axis] = 2 * len;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.shape()[i]);
  for (int i = axis + 1; i < 4; ++i) inner *= static_cast<std::size_t>(x.shape()[i]);
  (void)s;

  struct Tap {
    int i0, i1;
    double lam;
  };
  std::vector<Tap> taps(2 * len);
  for (int o = 0; o < 2 * len; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > len - 1) i0 = len - 1;
    const int i1 = std::min(i0 + 1, len - 1);
    taps[o] = {i0, i1, src - i0};
  }
  const auto& xv = x.data();
  std::vector<double> out(numel(shape));
  for (std::size_t a = 0; a < outer; ++a)
    for (int o = 0; o < 2 * len; ++o) {
      const Tap t = taps[o];
      const double* r0 = xv.data() + (a * len + t.i0) * inner;
      const double* r1 = xv.data() + (a * len + t.i1) * inner;
      double* dst = out.data() + (a * 2 * len + o) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = (1.0 - t.lam) * r0[i] + t.lam * r1[i];
    }
  auto xn = x.node();
  return make_result(shape, std::move(out), {xn},
                     [xn, taps = std::move(taps), outer, inner, len](Node& self) {
                       auto& g = xn->grad_buffer();
                       for (std::size_t a = 0; a < outer; ++a)
                         for (int o = 0; o < 2 * len; ++o) {
                           const Tap t = taps[o];
                           double* g0 = g.data() + (a * len + t.i0) * inner;
                           double* g1 = g.data() + (a * len + t.i1) * inner;
                           const double* src = self.grad.data() + (a * 2 * len + o) * inner;
                           for (std::size_t i = 0; i < inner; ++i) {
                             g0[i] += (1.0 - t.lam) * src[i];
                             g1[i] += t.lam * src[i];
                           }
                         }
                     });
}

}  // namespace

Tensor upsample_linear2(const Tensor& x) {
  return upsample_linear_axis(upsample_linear_axis(upsample_linear_axis(x, 3), 2), 1);
}

Tensor global_avg_pool(const Tensor& x) {
  const Spatial s = spatial_of(x, "global_avg_pool");
  const std::size_t n = s.n();
  std::vector<double> out(s.c, 0.0);
  for (int c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.data()[c * n + i];
    out[c] = acc / static_cast<double>(n);
  }
  auto xn = x.node();
  return make_result({s.c}, std::move(out), {xn}, [xn, n](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t c = 0; c < self.grad.size(); ++c) {
      const double v = self.grad[c] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) g[c * n + i] += v;
    }
  });
}

Tensor softmax_channels(const Tensor& x) {
  const Spatial s = spatial_of(x, "softmax_channels");
  const std::size_t n = s.n();
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < s.c; ++c) m = std::max(m, xv[c * n + i]);
    double z = 0.0;
    for (int c = 0; c < s.c; ++c) z += out[c * n + i] = std::exp(xv[c * n + i] - m);
    for (int c = 0; c < s.c; ++c) out[c * n + i] /= z;
  }
  auto xn = x.node();
  const int C = s.c;
  return make_result(x.shape(), std::move(out), {xn}, [xn, n, C](Node& self) {
    auto& g = xn->grad_buffer();
    const auto& p = self.value;
    for (std::size_t i = 0; i < n; ++i) {
      double inner = 0.0;
      for (int c = 0; c < C; ++c) inner += self.grad[c * n + i] * p[c * n + i];
      for (int c = 0; c < C; ++c) g[c * n + i] += p[c * n + i] * (self.grad[c * n + i] - inner);
    }
  });
}

Tensor attend_slots(const Tensor& z, const Tensor& slots, std::vector<double>* weights_out) {
  const Spatial s = spatial_of(z, "attend_slots");
  require_rank(slots, 2, "attend_slots slots");
  const int K = slots.dim(0);
  const int C = s.c;
  if (slots.dim(1) != C) {
    throw std::invalid_argument("attend_slots: feature dim " + std::to_string(C) +
                                " != slot dim " + std::to_string(slots.dim(1)));
  }
  if (K < 1) throw std::invalid_argument("attend_slots: empty slot bank");
  const auto N = static_cast<Eigen::Index>(s.n());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(C));

  const RowMat zq = owned(z.data().data(), C, N);
  const RowMat sl = owned(slots.data().data(), K, C);
  RowMat logits = (sl * zq).transpose() * inv_sqrt;  // [N, K]
  RowMat attn(N, K);
  for (Eigen::Index i = 0; i < N; ++i) {
    const double m = logits.row(i).maxCoeff();
    attn.row(i) = (logits.row(i).array() - m).exp();
    attn.row(i) /= attn.row(i).sum();
  }
  const RowMat o = sl.transpose() * attn.transpose();
  std::vector<double> out(o.data(), o.data() + o.size());
  if (weights_out) weights_out->assign(attn.data(), attn.data() + attn.size());

  auto zn = z.node();
  auto sn = slots.node();
  return make_result(z.shape(), std::move(out), {zn, sn},
                     [zn, sn, attn = std::move(attn), C, K, N, inv_sqrt](Node& self) {
                       const RowMat dout = owned(self.grad.data(), C, N);
                       const RowMat sl = owned(sn->value.data(), K, C);
                       const RowMat zq = owned(zn->value.data(), C, N);
                       RowMat dA = dout.transpose() * sl.transpose();  // [N, K]
                       RowMat dL(N, K);
                       for (Eigen::Index i = 0; i < N; ++i) {
                         const double inner = dA.row(i).dot(attn.row(i));
                         dL.row(i) = attn.row(i).array() * (dA.row(i).array() - inner);
                       }
                       dL *= inv_sqrt;
                       if (sn->requires_grad) {
                         RowMat gs = attn.transpose() * dout.transpose();
                         gs.noalias() += dL.transpose() * zq.transpose();
                         add_into(sn->grad_buffer().data(), gs);
                       }
                       if (zn->requires_grad) {
                         add_into(zn->grad_buffer().data(), sl.transpose() * dL.transpose());
                       }
                     });
}

Tensor rotate_quarter(const Tensor& x, int quarter_turns) {
  const Spatial s = spatial_of(x, "rotate_quarter");
  require_square_plane(s.h, s.w);
  const RotationTransform r(quarter_turns);
  if (r.quarter_turns() == 0) return x;
  const int n = s.h;
  std::vector<std::size_t> src(x.size());
  std::size_t o = 0;
  for (int c = 0; c < s.c; ++c)
    for (int d = 0; d < s.d; ++d)
      for (int h = 0; h < n; ++h)
        for (int w = 0; w < n; ++w, ++o) {
          const auto [sh, sw] = r.source(h, w, n);
          src[o] = ((static_cast<std::size_t>(c) * s.d + d) * n + sh) * n + sw;
        }
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.data()[src[i]];
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn}, [xn, src = std::move(src)](Node& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
  });
}

Tensor linear(const Tensor& v, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear weight");
  const int out_n = weight.dim(0);
  const int in_n = weight.dim(1);
  if (v.size() != static_cast<std::size_t>(in_n) || bias.size() != static_cast<std::size_t>(out_n)) {
    throw std::invalid_argument("linear: shape mismatch, input " + dims_str(v.shape()) +
                                " weight " + dims_str(weight.shape()));
  }
  std::vector<double> out(out_n);
  for (int o = 0; o < out_n; ++o) {
    double acc = bias.data()[o];
    for (int i = 0; i < in_n; ++i) acc += weight.data()[o * in_n + i] * v.data()[i];
    out[o] = acc;
  }
  auto vn = v.node();
  auto wn = weight.node();
  auto bn = bias.node();
  return make_result({out_n}, std::move(out), {vn, wn, bn},
                     [vn, wn, bn, out_n, in_n](Node& self) {
                       for (int o = 0; o < out_n; ++o) {
                         const double g = self.grad[o];
                         if (bn->requires_grad) bn->grad_buffer()[o] += g;
                         for (int i = 0; i < in_n; ++i) {
                           if (wn->requires_grad) wn->grad_buffer()[o * in_n + i] += g * vn->value[i];
                           if (vn->requires_grad) vn->grad_buffer()[i] += g * wn->value[o * in_n + i];
                         }
                       }
                     });
}

}  // namespace puir::ag

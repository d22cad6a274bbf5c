#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// Tensors are reference-counted graph nodes. An op result records its parents
// and a backward closure only when at least one input requires a gradient, so
// inference passes over parameters wrapped as constants retain no graph.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace puir::ag {

using Dims = std::vector<int>;

std::size_t numel(const Dims& dims);
std::string dims_str(const Dims& dims);

struct Node {
  Dims shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Dims shape, std::vector<double> values);
  static Tensor constant(Dims shape, double fill = 0.0);
  static Tensor scalar(double v) { return constant(Dims{}, std::vector<double>{v}); }
  /// Leaf that accumulates gradients.
  static Tensor parameter(Dims shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Dims& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Same values, no history.
  Tensor detach() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, op results record no history (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Runs reverse accumulation from a scalar output.
void backward(const Tensor& output);

// Elementwise arithmetic. Either operand may be a one-element tensor, which
// broadcasts against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log with inputs clamped below at `floor`; the clamp has zero gradient.
Tensor log(const Tensor& a, double floor = 0.0);
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean of squared differences; shapes must match.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Dims shape);
/// Stack one-element tensors into a vector.
Tensor stack_scalars(std::span<const Tensor> parts);
Tensor pick(const Tensor& v, std::size_t index);
Tensor logsumexp(const Tensor& v);
Tensor softmax(const Tensor& v);
Tensor l2_normalize(const Tensor& v);

// Channel-major volumetric ops on [C, D, H, W].
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor select_channel(const Tensor& x, int c);
Tensor stack_channels(std::span<const Tensor> channels);
Tensor upsample_nearest2(const Tensor& x);
/// Linear interpolation by 2 along every spatial axis (half-pixel centres).
Tensor upsample_linear2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
/// Per-voxel softmax across channels.
Tensor softmax_channels(const Tensor& x);
/// Per-voxel scaled dot-product attention of the C-dim feature at each voxel
/// against a [K, C] slot bank. Returns the retrieved features and, when
/// `weights_out` is set, the [N, K] attention weights.
Tensor attend_slots(const Tensor& z, const Tensor& slots, std::vector<double>* weights_out = nullptr);
/// Exact quarter-turn permutation about the depth axis, applied per channel.
Tensor rotate_quarter(const Tensor& x, int quarter_turns);

/// y = W v + b for a vector v.
Tensor linear(const Tensor& v, const Tensor& weight, const Tensor& bias);

}  // namespace puir::ag

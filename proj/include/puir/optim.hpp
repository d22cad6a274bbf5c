#pragma once

#include <string>
#include <utility>
#include <vector>

#include "puir/autograd.hpp"
#include "puir/io.hpp"

namespace puir::optim {

/// Adaptive-moment optimizer over a fixed list of named parameters.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, ag::Tensor>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  /// Applies one update from the accumulated gradients. Parameters with no
  /// gradient buffer are treated as having zero gradient.
  void step();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  std::vector<io::NamedArray> export_state() const;
  void import_state(const std::vector<io::NamedArray>& arrays);

 private:
  std::vector<std::pair<std::string, ag::Tensor>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
};

}  // namespace puir::optim

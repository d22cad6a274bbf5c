#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace puir {

/// Quarter turn about the depth (z) axis: k in {0, 1, 2, 3} for 0/90/180/270 degrees.
/// Composition is the cyclic group of order 4.
class RotationTransform {
 public:
  constexpr RotationTransform() = default;
  explicit constexpr RotationTransform(int quarter_turns) : k_(((quarter_turns % 4) + 4) % 4) {}

  constexpr int quarter_turns() const { return k_; }
  constexpr RotationTransform inverse() const { return RotationTransform((4 - k_) % 4); }
  constexpr RotationTransform then(RotationTransform next) const {
    return RotationTransform(k_ + next.k_);
  }
  constexpr bool operator==(const RotationTransform&) const = default;

  /// Source in-plane coordinate of output (h, w) for an n x n plane.
  /// One counter-clockwise turn: out[h, w] = in[w, n - 1 - h].
  constexpr std::pair<int, int> source(int h, int w, int n) const {
    switch (k_) {
      case 1: return {w, n - 1 - h};
      case 2: return {n - 1 - h, n - 1 - w};
      case 3: return {n - 1 - w, h};
      default: return {h, w};
    }
  }

 private:
  int k_ = 0;
};

inline void require_square_plane(int h, int w) {
  if (h != w) {
    throw std::invalid_argument("z-axis rotation requires H == W, got H=" + std::to_string(h) +
                                " W=" + std::to_string(w));
  }
}

}  // namespace puir

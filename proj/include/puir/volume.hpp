#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace puir {

/// Spatial extent of a registered grid, C-order (d, h, w).
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  bool operator==(const Shape3&) const = default;
  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

/// A registered 3D scalar grid stored as 32-bit floats in (d, h, w) order.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Shape3 shape, float fill = 0.0f)
      : shape_(shape), data_(shape.voxels(), fill) {}
  Volume(Shape3 shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.voxels()) {
      throw std::invalid_argument("Volume: data size " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
    }
  }

  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int d, int h, int w) const {
    return (static_cast<std::size_t>(d) * shape_.h + h) * shape_.w + w;
  }
  float& at(int d, int h, int w) { return data_[index(d, h, w)]; }
  float at(int d, int h, int w) const { return data_[index(d, h, w)]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool operator==(const Volume&) const = default;

 private:
  Shape3 shape_{};
  std::vector<float> data_;
};

/// Integer-valued grid used for tissue labels and binary masks.
class LabelVolume {
 public:
  LabelVolume() = default;
  explicit LabelVolume(Shape3 shape, std::uint8_t fill = 0)
      : shape_(shape), data_(shape.voxels(), fill) {}
  LabelVolume(Shape3 shape, std::vector<std::uint8_t> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.voxels()) {
      throw std::invalid_argument("LabelVolume: data size does not match shape " + shape_.str());
    }
  }

  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t index(int d, int h, int w) const {
    return (static_cast<std::size_t>(d) * shape_.h + h) * shape_.w + w;
  }
  std::uint8_t& at(int d, int h, int w) { return data_[index(d, h, w)]; }
  std::uint8_t at(int d, int h, int w) const { return data_[index(d, h, w)]; }
  std::uint8_t& operator[](std::size_t i) { return data_[i]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  std::vector<std::uint8_t>& data() { return data_; }
  const std::vector<std::uint8_t>& data() const { return data_; }

  std::size_t count(std::uint8_t value) const {
    std::size_t n = 0;
    for (auto v : data_) n += (v == value);
    return n;
  }
  bool operator==(const LabelVolume&) const = default;

 private:
  Shape3 shape_{};
  std::vector<std::uint8_t> data_;
};

}  // namespace puir

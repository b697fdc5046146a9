#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pcovkws/errors.hpp"

namespace pcovkws {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Scalar is float for training, double for verification.
template <typename Scalar>
class NDArray {
 public:
  using value_type = Scalar;

  NDArray() = default;

  explicit NDArray(Shape shape, Scalar fill = Scalar{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  NDArray(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("NDArray: shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " elements");
    }
  }

  template <typename Other>
  NDArray<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return NDArray<Other>(shape_, std::move(out));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  // Extent of the last axis; the channel axis everywhere in this library.
  std::size_t channels() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  std::vector<Scalar>& vec() noexcept { return data_; }
  const std::vector<Scalar>& vec() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const Scalar& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  NDArray reshaped(Shape shape) const { return NDArray(std::move(shape), data_); }

  NDArray& operator+=(const NDArray& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  NDArray& operator*=(Scalar s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  void require_same_shape(const NDArray& other, const char* op) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(op) + ": shape " + shape_str(shape_) + " vs " +
                           shape_str(other.shape_));
    }
  }

  friend bool operator==(const NDArray&, const NDArray&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
Scalar dot(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  Scalar acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename Scalar>
Scalar squared_norm(std::span<const Scalar> a) {
  return dot(a, a);
}

}  // namespace pcovkws

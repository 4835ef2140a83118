#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proard/error.hpp"

namespace proard {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major array of doubles. A rank-0 array is a scalar.
class Array {
 public:
  Array() : data_(1, 0.0) {}

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Array(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(), ErrorKind::Shape,
            "array data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  double item() const {
    require(data_.size() == 1, ErrorKind::Shape,
            "item() on array of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Same data reinterpreted under a new shape of equal size.
  Array reshaped(Shape shape) const {
    require(shape_size(shape) == data_.size(), ErrorKind::Shape,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Array(std::move(shape), data_);
  }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Array& a, const Array& b, const char* what) {
  require(a.shape() == b.shape(), ErrorKind::Shape,
          std::string(what) + ": " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

/// Rows [begin, end) along the leading dimension.
inline Array take_rows(const Array& a, std::span<const std::size_t> rows) {
  require(a.rank() >= 1, ErrorKind::Shape, "take_rows on scalar");
  const std::size_t stride = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = rows.size();
  Array out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < a.dim(0), ErrorKind::Shape, "take_rows index out of range");
    std::copy_n(a.data().begin() + rows[r] * stride, stride,
                out.data().begin() + r * stride);
  }
  return out;
}

inline double max_abs_diff(const Array& a, const Array& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace proard

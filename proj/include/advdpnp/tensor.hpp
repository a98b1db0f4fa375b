// Dense row-major tensor of 64-bit floats. Desk-scale on purpose: values are
// plain std::vector<double>, shapes are checked eagerly, nothing is lazy.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace advdpnp {

// Malformed configuration, file, or argument.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: non-finite values, degenerate geometry, collapse.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int extent : shape) n *= extent;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 2-D accessors (row-major).
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  int rows() const { return shape_[0]; }
  int cols() const { return shape_[1]; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Row view helpers for batched data (rank >= 1, row = leading index).
  std::int64_t row_size() const {
    return shape_.empty() ? 1 : numel() / shape_[0];
  }
  const double* row(int r) const { return data_.data() + r * row_size(); }
  double* row(int r) { return data_.data() + r * row_size(); }
  Tensor row_copy(int r) const {
    Shape s(shape_.begin() + 1, shape_.end());
    return Tensor(s, std::vector<double>(row(r), row(r) + row_size()));
  }

 private:
  void check_shape() const {
    for (int extent : shape_) {
      if (extent <= 0) {
        throw ConfigError("tensor shape " + shape_str(shape_) +
                          " has a non-positive extent");
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double dot(const double* a, const double* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const double* a, std::int64_t n) {
  return std::sqrt(dot(a, a, n));
}

inline double l2_norm(const Tensor& t) { return l2_norm(t.data(), t.numel()); }

}  // namespace advdpnp

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashgrpo/errors.hpp"

namespace flashgrpo {

// Dense row-major tensor of doubles. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), values_(element_count(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (element_count(shape_) != values_.size()) {
      throw DimensionError("tensor: shape product " +
                           std::to_string(element_count(shape_)) +
                           " != value count " + std::to_string(values_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  static std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Rank-2 helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }

  double item() const {
    if (values_.size() != 1) throw DimensionError("tensor: item() on non-scalar");
    return values_[0];
  }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

inline std::string shape_string(const Tensor::Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Stacks equally shaped rank-1 tensors into [n, d].
inline Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty input");
  const std::size_t d = rows.front().size();
  std::vector<double> values;
  values.reserve(rows.size() * d);
  for (const Tensor& r : rows) {
    if (r.size() != d) throw DimensionError("stack_rows: ragged rows");
    values.insert(values.end(), r.values().begin(), r.values().end());
  }
  return Tensor::matrix(rows.size(), d, std::move(values));
}

inline Tensor row_tensor(const Tensor& m, std::size_t r) {
  auto span = m.row(r);
  return Tensor::vector(std::vector<double>(span.begin(), span.end()));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double squared_distance(std::span<const double> a,
                               std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("squared_distance: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace flashgrpo

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitbind/errors.hpp"

namespace vitbind {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major float32 tensor. Storage only; arithmetic that needs precision
// accumulates in double (see the kernels below).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_volume(shape_) != data_.size()) {
      throw DataError("tensor shape " + shape_string(shape_) + " does not match " +
                      std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, float fill = 0.0f) {
    return Tensor(Shape{rows, cols}, fill);
  }

  static Tensor vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // Matrix view: rank-1 tensors are treated as a single row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 0;
    return shape_.size() >= 2 ? data_.size() / shape_[0] : shape_[0];
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }

  bool all_finite() const noexcept {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double squared_norm(std::span<const float> a) { return dot(a, a); }

// C = A * B with A (m x k) and B (k x n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DataError("matmul inner dimension mismatch " + shape_string(a.shape()) + " x " +
                    shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(m, n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a.data().data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const float* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    float* crow = c.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
  }
  return c;
}

// C = A * B^T with A (m x k) and B (n x k).
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DataError("matmul_bt inner dimension mismatch " + shape_string(a.shape()) + " x " +
                    shape_string(b.shape()) + "^T");
  }
  Tensor c = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
  return c;
}

// y = W x for W (k x d), x (d).
inline std::vector<float> matvec(const Tensor& w, std::span<const float> x) {
  if (w.cols() != x.size()) {
    throw DataError("matvec dimension mismatch: " + shape_string(w.shape()) + " with vector of " +
                    std::to_string(x.size()));
  }
  std::vector<float> y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = static_cast<float>(dot(w.row(r), x));
  return y;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Rows `indices` of a matrix, in order.
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  Tensor out = Tensor::matrix(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DataError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace vitbind

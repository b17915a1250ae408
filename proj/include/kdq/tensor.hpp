#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace kdq {

template <typename T>
using Vector = std::vector<T>;

/// Dense row-major matrix. Shapes are fixed at construction.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    for (std::size_t k = 0; k < data.size(); ++k) out.data[k] = static_cast<U>(data[k]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

template <typename U, typename T>
Vector<U> cast_vector(const Vector<T>& v) {
  Vector<U> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = static_cast<U>(v[k]);
  return out;
}

// y += W x
template <typename T>
void matvec_add(const Matrix<T>& w, std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const T* wr = w.data.data() + i * w.cols;
    T acc = y[i];
    for (std::size_t j = 0; j < w.cols; ++j) acc += wr[j] * x[j];
    y[i] = acc;
  }
}

// dx += W^T dy
template <typename T>
void matvec_transposed_add(const Matrix<T>& w, std::span<const T> dy, std::span<T> dx) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    const T* wr = w.data.data() + i * w.cols;
    const T g = dy[i];
    for (std::size_t j = 0; j < w.cols; ++j) dx[j] += wr[j] * g;
  }
}

// W += dy x^T
template <typename T>
void outer_add(Matrix<T>& w, std::span<const T> dy, std::span<const T> x) {
  for (std::size_t i = 0; i < w.rows; ++i) {
    T* wr = w.data.data() + i * w.cols;
    const T g = dy[i];
    for (std::size_t j = 0; j < w.cols; ++j) wr[j] += g * x[j];
  }
}

}  // namespace kdq

#pragma once

// Q7 fixed-point primitives: an int8 q stands for q / 2^7 in [-1, 127/128].
//
// Rounding conventions:
//   * float -> int8 conversions round half away from zero, then saturate.
//   * the matrix-vector kernel adds 2^6 to the int32 accumulator and
//     arithmetic-shifts right by 7, then saturates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kdq/errors.hpp"
#include "kdq/op_count.hpp"
#include "kdq/tensor.hpp"

namespace kdq {

inline constexpr int kQ7Shift = 7;
inline constexpr float kQ7One = 128.0f;
// 127 * 128 * cols must stay inside int32.
inline constexpr std::size_t kMaxQ7Cols = std::size_t{1} << 17;

/// Per-tensor quantized weight matrix: entry (i, j) represents scale * data(i, j).
class Q7Matrix {
 public:
  Q7Matrix() = default;
  Q7Matrix(std::size_t rows, std::size_t cols, std::vector<std::int8_t> data, float scale);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  float scale() const { return scale_; }
  const std::vector<std::int8_t>& data() const { return data_; }
  std::int8_t at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  /// scale * q for every entry.
  Matrix<float> dequantize() const;

  friend bool operator==(const Q7Matrix&, const Q7Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::int8_t> data_;
  float scale_ = 1.0f;
};

using Q7Vector = std::vector<std::int8_t>;

std::int8_t saturate_q7(std::int64_t v);

/// round-half-away-from-zero then clamp to [-128, 127]
std::int8_t round_to_q7(double v);

/// s = 2 * max|W| / 255; W_q = sat(round(W / s)). All-zero W gets s = 1.
Q7Matrix quantize_matrix(const Matrix<float>& w);

/// q_i = sat(round(2^7 * x_i / input_scale))
Q7Vector to_q7(std::span<const float> x, float input_scale);

/// y_i = sat((sum_j a_ij x_j + 2^6) >> 7)
Q7Vector q7_matvec(const Q7Matrix& a, std::span<const std::int8_t> x);

/// Same kernel with the accumulator type counting integer multiplies.
Q7Vector q7_matvec_counted(const Q7Matrix& a, std::span<const std::int8_t> x);

/// (y_i / 2^7) * rescale
std::vector<float> rescale_to_float(std::span<const std::int8_t> y, float rescale);

/// rescale factor compensating both scales and the kernel's implicit 2^-7
inline float rescale_factor(float input_scale, float weight_scale) {
  return kQ7One * input_scale * weight_scale;
}

bool is_power_of_two(float v);

namespace detail {

template <typename Acc>
Q7Vector q7_matvec_impl(const Q7Matrix& a, std::span<const std::int8_t> x) {
  if (a.cols() != x.size()) {
    throw InvalidInput("q7_matvec: matrix has " + std::to_string(a.cols()) +
                       " columns but vector has " + std::to_string(x.size()) + " entries");
  }
  Q7Vector y(a.rows());
  const std::int8_t* base = a.data().data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::int8_t* row = base + i * a.cols();
    Acc acc{0};
    for (std::size_t j = 0; j < a.cols(); ++j) {
      acc += Acc{static_cast<std::int32_t>(row[j])} * Acc{static_cast<std::int32_t>(x[j])};
    }
    const std::int32_t raw = static_cast<std::int32_t>(acc);
    y[i] = saturate_q7((static_cast<std::int64_t>(raw) + (1 << (kQ7Shift - 1))) >> kQ7Shift);
  }
  return y;
}

}  // namespace detail
}  // namespace kdq

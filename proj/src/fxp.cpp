#include "kdq/fxp.hpp"

#include <algorithm>
#include <string>

namespace kdq {

Q7Matrix::Q7Matrix(std::size_t rows, std::size_t cols, std::vector<std::int8_t> data, float scale)
    : rows_(rows), cols_(cols), data_(std::move(data)), scale_(scale) {
  if (data_.size() != rows_ * cols_) {
    throw InvalidInput("Q7Matrix: expected " + std::to_string(rows_ * cols_) + " entries, got " +
                       std::to_string(data_.size()));
  }
  if (!(scale_ > 0.0f) || !std::isfinite(scale_)) {
    throw InvalidInput("Q7Matrix: scale must be positive and finite");
  }
  if (cols_ > kMaxQ7Cols) {
    throw InvalidInput("Q7Matrix: too many columns for a 32-bit accumulator");
  }
}

Matrix<float> Q7Matrix::dequantize() const {
  Matrix<float> out(rows_, cols_);
  for (std::size_t k = 0; k < data_.size(); ++k) out.data[k] = scale_ * static_cast<float>(data_[k]);
  return out;
}

std::int8_t saturate_q7(std::int64_t v) {
  return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127));
}

std::int8_t round_to_q7(double v) {
  // std::round is half-away-from-zero
  const double r = std::round(v);
  if (r >= 127.0) return 127;
  if (r <= -128.0) return -128;
  return static_cast<std::int8_t>(r);
}

Q7Matrix quantize_matrix(const Matrix<float>& w) {
  if (w.empty()) throw InvalidInput("quantize_matrix: empty matrix");
  float max_abs = 0.0f;
  for (float v : w.data) {
    if (!std::isfinite(v)) throw InvalidInput("quantize_matrix: non-finite entry");
    max_abs = std::max(max_abs, std::fabs(v));
  }
  if (max_abs == 0.0f) {
    return Q7Matrix(w.rows, w.cols, std::vector<std::int8_t>(w.size(), 0), 1.0f);
  }
  const float scale = 2.0f * max_abs / 255.0f;
  // Quotients use the unrounded scale so the extremum lands on exactly +-127.5.
  // w * 255 and 2 * max are exact in double; one rounding in the quotient.
  const double denom = 2.0 * static_cast<double>(max_abs);
  std::vector<std::int8_t> q(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    q[k] = round_to_q7(static_cast<double>(w.data[k]) * 255.0 / denom);
  }
  return Q7Matrix(w.rows, w.cols, std::move(q), scale);
}

Q7Vector to_q7(std::span<const float> x, float input_scale) {
  if (!(input_scale > 0.0f)) throw InvalidInput("to_q7: input scale must be positive");
  Q7Vector q(x.size());
  const float gain = kQ7One / input_scale;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw InvalidInput("to_q7: non-finite input");
    q[i] = round_to_q7(static_cast<double>(x[i] * gain));
  }
  return q;
}

Q7Vector q7_matvec(const Q7Matrix& a, std::span<const std::int8_t> x) {
  return detail::q7_matvec_impl<std::int32_t>(a, x);
}

Q7Vector q7_matvec_counted(const Q7Matrix& a, std::span<const std::int8_t> x) {
  return detail::q7_matvec_impl<Counted<std::int32_t>>(a, x);
}

std::vector<float> rescale_to_float(std::span<const std::int8_t> y, float rescale) {
  if (!(rescale > 0.0f)) throw InvalidInput("rescale_to_float: rescale must be positive");
  std::vector<float> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = (static_cast<float>(y[i]) / kQ7One) * rescale;
  return out;
}

bool is_power_of_two(float v) {
  if (!(v > 0.0f) || !std::isfinite(v)) return false;
  int exp = 0;
  return std::frexp(v, &exp) == 0.5f;
}

}  // namespace kdq

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <random>

#include "kdq/fxp.hpp"

using namespace kdq;

namespace {

// Integer oracle for the Q7 kernel: floor((sum + 64) / 128) via floor division,
// independent of the shift in the kernel.
std::int8_t oracle_row(const std::vector<int>& a, const std::vector<int>& x) {
  long long acc = 0;
  for (std::size_t j = 0; j < a.size(); ++j) acc += static_cast<long long>(a[j]) * x[j];
  const long long num = acc + 64;
  long long q = num / 128;
  if (num % 128 != 0 && num < 0) --q;  // floor toward -inf
  if (q > 127) q = 127;
  if (q < -128) q = -128;
  return static_cast<std::int8_t>(q);
}

}  // namespace

TEST_CASE("quantize_matrix scale and rounding") {
  SUBCASE("all-zero matrix gets unit scale") {
    const Q7Matrix q = quantize_matrix(Matrix<float>(1, 1, 0.0f));
    CHECK(q.scale() == 1.0f);
    CHECK(q.at(0, 0) == 0);
  }
  SUBCASE("max |W| = 1 gives 2/255") {
    Matrix<float> w(2, 2);
    w.data = {1.0f, -0.25f, 0.5f, 0.0f};
    CHECK(quantize_matrix(w).scale() == doctest::Approx(2.0 / 255.0).epsilon(1e-7));
  }
  SUBCASE("half-away rounding and saturation of the extremum") {
    Matrix<float> w(1, 2);
    w.data = {0.5f, -1.0f};
    const Q7Matrix q = quantize_matrix(w);
    CHECK(q.at(0, 0) == 64);    // 63.75
    CHECK(q.at(0, 1) == -128);  // -127.5 -> away from zero
    w.data = {1.0f, -0.5f};
    CHECK(quantize_matrix(w).at(0, 0) == 127);  // 127.5 -> 128 -> clamp
  }
  SUBCASE("non-finite entries are rejected") {
    Matrix<float> w(1, 1, NAN);
    CHECK_THROWS_AS(quantize_matrix(w), InvalidInput);
    CHECK_THROWS_AS(quantize_matrix(Matrix<float>()), InvalidInput);
  }
}

TEST_CASE("quantization error stays within half a step") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix<float> w(1 + trial % 7, 1 + trial % 5);
    for (auto& v : w.data) v = u(rng);
    const Q7Matrix q = quantize_matrix(w);
    const double s = q.scale();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double err = std::fabs(s * q.data()[k] - w.data[k]);
      // the positive extremum may lose one extra half step to saturation
      const double bound = (w.data[k] > 0 && q.data()[k] == 127) ? s : 0.5 * s;
      // plus the float rounding of the stored scale, amplified by |q| <= 128
      CHECK(err <= bound + 128.0 * s * 0x1p-23);
    }
  }
}

TEST_CASE("entries that are exact multiples of the scale dequantize exactly") {
  // Scale 1/64 exactly: max |W| = 127.5/64. Every non-extremal k/64 is exact.
  Matrix<float> w(2, 3);
  w.data = {127.5f / 64, -3.0f / 64, 17.0f / 64, 0.0f, -100.0f / 64, 1.0f / 64};
  const Q7Matrix q = quantize_matrix(w);
  CHECK(q.scale() == 1.0f / 64);
  const Matrix<float> back = q.dequantize();
  for (std::size_t k = 1; k < w.size(); ++k) CHECK(back.data[k] == w.data[k]);
  CHECK(back.data[0] == 127.0f / 64);
}

TEST_CASE("to_q7 examples") {
  const float s = 0.75f;
  CHECK(to_q7(std::vector<float>{0.0f}, s) == Q7Vector{0});
  CHECK(to_q7(std::vector<float>{s}, s) == Q7Vector{127});
  CHECK(to_q7(std::vector<float>{-s / 2}, s) == Q7Vector{-64});
  CHECK(to_q7(std::vector<float>{-s}, s) == Q7Vector{-128});
  CHECK_THROWS_AS(to_q7(std::vector<float>{1.0f}, 0.0f), InvalidInput);
  CHECK_THROWS_AS(to_q7(std::vector<float>{INFINITY}, 1.0f), InvalidInput);
}

TEST_CASE("q7_matvec examples") {
  CHECK(q7_matvec(Q7Matrix(1, 1, {64}, 1.0f), Q7Vector{64}) == Q7Vector{32});
  CHECK(q7_matvec(Q7Matrix(2, 2, {5, -7, 127, -128}, 1.0f), Q7Vector{0, 0}) == Q7Vector{0, 0});
  CHECK(q7_matvec(Q7Matrix(1, 2, {127, 127}, 1.0f), Q7Vector{127, 127}) == Q7Vector{127});
  CHECK(q7_matvec(Q7Matrix(1, 2, {-128, -128}, 1.0f), Q7Vector{127, 127}) == Q7Vector{-128});
  CHECK_THROWS_AS(q7_matvec(Q7Matrix(1, 2, {1, 1}, 1.0f), Q7Vector{1}), InvalidInput);
}

TEST_CASE("q7_matvec matches the integer oracle on random instances") {
  std::mt19937 rng(5);
  std::uniform_int_distribution<int> q(-128, 127);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t rows = dim(rng), cols = dim(rng);
    std::vector<std::int8_t> a(rows * cols);
    Q7Vector x(cols);
    for (auto& v : a) v = static_cast<std::int8_t>(q(rng));
    for (auto& v : x) v = static_cast<std::int8_t>(q(rng));
    const Q7Matrix m(rows, cols, a, 0.5f);
    const Q7Vector y = q7_matvec(m, x);
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<int> ar(cols), xv(x.begin(), x.end());
      for (std::size_t j = 0; j < cols; ++j) ar[j] = a[i * cols + j];
      REQUIRE(y[i] == oracle_row(ar, xv));
    }
  }
}

TEST_CASE("counted kernel gives the same result and counts only integer multiplies") {
  const Q7Matrix m(3, 4, {1, 2, 3, 4, -5, 6, -7, 8, 9, -10, 11, 12}, 1.0f);
  const Q7Vector x{100, -50, 25, 127};
  TallyScope scope;
  const Q7Vector y = q7_matvec_counted(m, x);
  CHECK(y == q7_matvec(m, x));
  CHECK(scope.delta().int_mults == 12);
  CHECK(scope.delta().float_mults == 0);
}

TEST_CASE("rescale_to_float and the full round trip") {
  CHECK(rescale_to_float(Q7Vector{0}, 3.0f) == std::vector<float>{0.0f});
  CHECK(rescale_to_float(Q7Vector{64}, 2.0f) == std::vector<float>{1.0f});

  Matrix<float> w(1, 1, 0.5f);
  const Q7Matrix wq = quantize_matrix(w);
  const float s_in = 1.0f;
  const Q7Vector xq = to_q7(std::vector<float>{0.5f}, s_in);
  const auto out = rescale_to_float(q7_matvec(wq, xq), rescale_factor(s_in, wq.scale()));
  CHECK(std::fabs(out[0] - 0.25f) <= 2.0f / 255.0f);
}

TEST_CASE("dequantized MVM error is bounded by the scales and width") {
  std::mt19937 rng(99);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_int_distribution<int> dim(1, 32);
  const float scales[] = {0.25f, 1.0f, 4.0f};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = dim(rng), cols = dim(rng);
    const float s_in = scales[trial % 3];
    Matrix<float> w(rows, cols);
    for (auto& v : w.data) v = 2.0f * u(rng);
    std::vector<float> x(cols);
    // |x| < s_in / cols keeps inputs and outputs inside Q7 range
    for (auto& v : x) v = u(rng) * s_in / static_cast<float>(cols + 1);
    const Q7Matrix wq = quantize_matrix(w);
    const auto y = rescale_to_float(q7_matvec(wq, to_q7(x, s_in)), rescale_factor(s_in, wq.scale()));
    const double sw = wq.scale();
    // weight rounding (<= 1 step incl. saturation) x input (<= 128 quanta),
    // input rounding (1/2 quantum) x weight (<= 128), plus output rounding
    const double bound = sw * s_in / 128.0 * (cols * (128.0 + 64.5) + 64.0) * (1 + 1e-5);
    for (std::size_t i = 0; i < rows; ++i) {
      double exact = 0;
      for (std::size_t j = 0; j < cols; ++j) exact += static_cast<double>(w(i, j)) * x[j];
      REQUIRE(std::fabs(y[i] - exact) <= bound);
    }
  }
}

TEST_CASE("saturation never flips sign") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-1000.0, 1000.0);
  for (int i = 0; i < 10000; ++i) {
    const double v = u(rng);
    const int q = round_to_q7(v);
    if (v > 0.5) CHECK(q > 0);
    if (v < -0.5) CHECK(q < 0);
  }
}

TEST_CASE("power-of-two detection") {
  CHECK(is_power_of_two(1.0f));
  CHECK(is_power_of_two(0.125f));
  CHECK(is_power_of_two(8.0f));
  CHECK_FALSE(is_power_of_two(3.0f));
  CHECK_FALSE(is_power_of_two(0.0f));
  CHECK_FALSE(is_power_of_two(-2.0f));
}

TEST_CASE("Q7Matrix construction guards") {
  CHECK_THROWS_AS(Q7Matrix(2, 2, {1, 2, 3}, 1.0f), InvalidInput);
  CHECK_THROWS_AS(Q7Matrix(1, 1, {1}, 0.0f), InvalidInput);
  CHECK_THROWS_AS(Q7Matrix(1, 1, {1}, INFINITY), InvalidInput);
}

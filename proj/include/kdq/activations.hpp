#pragma once

// Exact and rational-approximation activations.
//
// The approximation is the 7-division Gauss continued fraction of tanh,
// collapsed to a [7/6] rational function:
//
//   tanh(x) ~ (x^7 + 378x^5 + 17325x^3 + 135135x) / (28x^6 + 3150x^4 + 62370x^2 + 135135)
//
// valid on [-4.972, 4.972] and clipped to +-1 outside. Inside the interval the
// ratio overshoots 1 by < 1e-7 near the edge; that is passed through as-is.

#include <cmath>

#include "kdq/op_count.hpp"

namespace kdq {

inline constexpr double kTanhApproxLimit = 4.972;

enum class ActivationMode { kExact, kApprox };

template <typename T>
T tanh_exact(T x) {
  return tanh(x);
}

template <typename T>
T sigmoid_exact(T x) {
  // Evaluated on |x| and reflected so that s(x) + s(-x) == 1 exactly.
  if (x < T(0)) return T(1) - sigmoid_exact(-x);
  return T(1) / (T(1) + exp(-x));
}

template <typename T>
T tanh_approx(T x) {
  if (x > T(kTanhApproxLimit)) return T(1);
  if (x < T(-kTanhApproxLimit)) return T(-1);
  const T x2 = x * x;
  const T num = x * (((x2 + T(378)) * x2 + T(17325)) * x2 + T(135135));
  const T den = ((T(28) * x2 + T(3150)) * x2 + T(62370)) * x2 + T(135135);
  return num / den;
}

/// Logistic function through the half-argument identity s(x) = (tanh(x/2) + 1) / 2,
/// so it saturates to exactly 0 / 1 once |x| exceeds twice the tanh limit.
template <typename T>
T sigmoid_approx(T x) {
  if (x < T(0)) return T(1) - sigmoid_approx(-x);
  return (tanh_approx(x * T(0.5)) + T(1)) * T(0.5);
}

/// (tanh(x) + 1) / 2 with the approximate tanh and no argument halving. This is
/// a steeper curve than the logistic function; kept for ablation only.
template <typename T>
T sigmoid_approx_literal(T x) {
  if (x < T(0)) return T(1) - sigmoid_approx_literal(-x);
  return (tanh_approx(x) + T(1)) * T(0.5);
}

template <typename T>
T activate_sigmoid(T x, ActivationMode mode) {
  return mode == ActivationMode::kExact ? sigmoid_exact(x) : sigmoid_approx(x);
}

template <typename T>
T activate_tanh(T x, ActivationMode mode) {
  return mode == ActivationMode::kExact ? tanh_exact(x) : tanh_approx(x);
}

}  // namespace kdq

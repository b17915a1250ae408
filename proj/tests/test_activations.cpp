#include <doctest.h>

#include <cmath>
#include <random>

#include "kdq/activations.hpp"

using namespace kdq;

TEST_CASE("exact activations") {
  CHECK(tanh_exact(0.0) == 0.0);
  CHECK(tanh_exact(20.0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(tanh_exact(1.0) == doctest::Approx(0.7615941559557649).epsilon(1e-15));
  CHECK(sigmoid_exact(0.0) == 0.5);
  CHECK(sigmoid_exact(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(sigmoid_exact(-800.0) == 0.0);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-30.0f, 30.0f);
  for (int i = 0; i < 1000; ++i) {
    const float x = u(rng);
    CHECK(sigmoid_exact(x) + sigmoid_exact(-x) == 1.0f);
  }
}

TEST_CASE("tanh_approx point values") {
  CHECK(tanh_approx(0.0) == 0.0);
  CHECK(tanh_approx(6.0) == 1.0);
  CHECK(tanh_approx(-6.0) == -1.0);
  CHECK(tanh_approx(1.0) == doctest::Approx(152839.0 / 200683.0).epsilon(1e-15));
  CHECK(std::fabs(tanh_approx(1.0) - std::tanh(1.0)) < 1e-6);
  CHECK(std::fabs(tanh_approx(1.0f) - std::tanh(1.0f)) < 1e-6f);
  // the boundary value itself is still evaluated, not clipped
  CHECK(tanh_approx(4.972) != 1.0);
}

TEST_CASE("sigmoid approximations") {
  CHECK(sigmoid_approx(0.0) == 0.5);
  CHECK(sigmoid_approx(1.0) == doctest::Approx(0.7310585786).epsilon(1e-6));
  CHECK(sigmoid_approx(-20.0) == 0.0);
  CHECK(sigmoid_approx(20.0) == 1.0);

  CHECK(sigmoid_approx_literal(0.0) == 0.5);
  CHECK(sigmoid_approx_literal(-6.0) == 0.0);
  CHECK(sigmoid_approx_literal(6.0) == 1.0);
  CHECK(sigmoid_approx_literal(1.0) == doctest::Approx(0.8807971).epsilon(1e-6));
}

TEST_CASE("oddness and complement hold exactly") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(-12.0f, 12.0f);
  for (int i = 0; i < 20000; ++i) {
    const float x = u(rng);
    REQUIRE(tanh_approx(-x) == -tanh_approx(x));
    REQUIRE(sigmoid_approx(x) + sigmoid_approx(-x) == 1.0f);
    REQUIRE(sigmoid_approx_literal(x) + sigmoid_approx_literal(-x) == 1.0f);
  }
}

TEST_CASE("grid oracle: error, range and monotonicity on the valid interval") {
  // Grid max measured at 9.61e-5 (at the interval edges), overshoot 7.4e-8.
  double max_err = 0, max_abs = 0, prev = -2;
  bool monotone = true;
  for (int k = -4972; k <= 4972; ++k) {
    const double x = k * 1e-3;
    const double y = tanh_approx(x);
    max_err = std::max(max_err, std::fabs(y - std::tanh(x)));
    max_abs = std::max(max_abs, std::fabs(y));
    monotone = monotone && y >= prev;
    prev = y;
  }
  CHECK(max_err <= 1.0e-4);
  CHECK(max_err > 9.0e-5);
  CHECK(max_abs - 1.0 <= 1e-4);
  CHECK(monotone);

  float max_err_f = 0;
  for (int k = -4972; k <= 4972; ++k) {
    const float x = static_cast<float>(k) * 1e-3f;
    max_err_f = std::max(max_err_f, std::fabs(tanh_approx(x) - std::tanh(x)));
  }
  CHECK(max_err_f <= 1.0e-4f);
}

TEST_CASE("activation mode dispatch") {
  CHECK(activate_tanh(1.0, ActivationMode::kExact) == std::tanh(1.0));
  CHECK(activate_tanh(1.0, ActivationMode::kApprox) == tanh_approx(1.0));
  CHECK(activate_sigmoid(0.3, ActivationMode::kApprox) == sigmoid_approx(0.3));
}

#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kdq/model.hpp"
#include "kdq/qmodel.hpp"
#include "kdq/training.hpp"

namespace kdq::testing {

inline GruMlpModel random_model(const Architecture& arch, std::uint32_t seed, float spread = 0.8f) {
  GruMlpModel m = GruMlpModel::zeros(arch);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-spread, spread);
  m.for_each_param([&](const std::string&, std::span<float> v) {
    for (auto& x : v) x = u(rng);
  });
  for (std::size_t i = 0; i < arch.input_dim; ++i) {
    m.norm_mean[i] = 0.1f * static_cast<float>(i);
    m.norm_inv_std[i] = 0.5f + 0.25f * static_cast<float>(i);
  }
  return m;
}

inline Window random_window(const Architecture& arch, std::uint32_t seed, float sigma = 1.5f) {
  Window w(arch.sequence_length, arch.input_dim);
  std::mt19937 rng(seed);
  std::normal_distribution<float> n(0.0f, sigma);
  for (auto& v : w.data) v = n(rng);
  return w;
}

struct GradCheck {
  double max_rel_error = 0;
  std::string worst_param;
};

/// Compares backward<double> against central differences of the batch loss.
/// Relative error is |g - fd| / max(|g|, |fd|, floor).
inline GradCheck check_gradients(const BasicGruMlp<double>& model, std::span<const TrainExample> batch,
                                 const KdConfig& kd, double eps = 1e-4, double floor = 1e-6) {
  Gradients<double> grads;
  backward<double>(batch, model, kd, grads);
  std::vector<double> analytic;
  grads.for_each_param([&](const std::string&, std::span<const double> s) {
    analytic.insert(analytic.end(), s.begin(), s.end());
  });
  BasicGruMlp<double> probe = model;
  Gradients<double> scratch;
  GradCheck out;
  std::size_t k = 0;
  probe.for_each_param([&](const std::string& name, std::span<double> s) {
    for (auto& w : s) {
      const double orig = w;
      w = orig + eps;
      const double up = backward<double>(batch, probe, kd, scratch);
      w = orig - eps;
      const double down = backward<double>(batch, probe, kd, scratch);
      w = orig;
      const double fd = (up - down) / (2 * eps);
      const double g = analytic[k++];
      const double rel = std::fabs(g - fd) / std::max({std::fabs(g), std::fabs(fd), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_param = name;
      }
    }
  });
  return out;
}

/// A quantized model plus windows on which the Q7 pipeline is exact: every
/// input and hidden quantum is a multiple of 32, every weight quantum is even
/// and gate pre-activations are large enough that the approximate
/// activations saturate to exactly 0, 1 or +-1. No rounding occurs anywhere,
/// so q_forward must reproduce the float forward of the dequantized model.
struct ExactCase {
  QuantizedGruMlpModel qmodel;
  std::vector<Window> windows;
};

inline ExactCase exact_case(std::uint32_t seed, std::size_t num_windows = 8) {
  std::mt19937 rng(seed);
  auto coin = [&] { return (rng() & 1u) ? 1 : -1; };
  Architecture a;
  a.num_gru_layers = 1;
  a.hidden_size = 2;
  a.num_classes = 2;
  a.sequence_length = 16;
  a.input_dim = 3;
  const std::size_t L = 2;
  auto q7 = [](std::size_t r, std::size_t c, std::vector<std::int8_t> d, float s) {
    return Q7Matrix(r, c, std::move(d), s);
  };

  QuantizedGruMlpModel qm;
  qm.arch = a;
  qm.norm_mean = {0.0f, 0.0f, 0.0f};
  qm.norm_inv_std = {1.0f, 1.0f, 1.0f};
  QGruLayer layer;
  // reset pinned open by its bias
  layer.reset = {q7(L, 3, std::vector<std::int8_t>(L * 3, 0), 0.25f), q7(L, L, std::vector<std::int8_t>(L * L, 0), 0.25f),
                 {20.0f, 20.0f}, {0.0f, 0.0f}};
  // update gate driven by axis 2 with weight +-16: z is exactly 0 or 1
  const auto u0 = static_cast<std::int8_t>(64 * coin()), u1 = static_cast<std::int8_t>(64 * coin());
  layer.update = {q7(L, 3, {0, 0, u0, 0, 0, u1}, 0.25f), q7(L, L, {0, 0, 0, 0}, 0.25f), {0.0f, 0.0f}, {0.0f, 0.0f}};
  // candidate: unit i reads axis i with weight +-16, recurrent weights +-0.5
  const auto c0 = static_cast<std::int8_t>(64 * coin()), c1 = static_cast<std::int8_t>(64 * coin());
  std::vector<std::int8_t> hw(L * L);
  for (auto& v : hw) v = static_cast<std::int8_t>(2 * coin());
  layer.candidate = {q7(L, 3, {c0, 0, 0, 0, c1, 0}, 0.25f), q7(L, L, hw, 0.25f), {0.0f, 0.0f}, {0.0f, 0.0f}};
  qm.layers.push_back(layer);

  std::vector<std::int8_t> w1(2 * L), w2(2 * 2);
  for (auto& v : w1) v = static_cast<std::int8_t>(coin() > 0 ? 4 : -2);
  for (auto& v : w2) v = static_cast<std::int8_t>(8 * coin());
  qm.mlp.hidden_weights = q7(2, L, w1, 0.125f);
  qm.mlp.hidden_bias = {0.25f, 0.25f};
  qm.mlp.output_weights = q7(2, 2, w2, 0.5f);
  qm.mlp.output_bias = {0.5f, -0.25f};
  qm = with_scales(qm, {2.0f, 2.0f, 2.0f});

  ExactCase out{qm, {}};
  const float levels[] = {-1.0f, -0.5f, 0.5f, 1.0f};
  for (std::size_t k = 0; k < num_windows; ++k) {
    Window w(a.sequence_length, a.input_dim);
    for (std::size_t t = 0; t < w.rows; ++t) {
      w(t, 0) = levels[rng() % 4];
      w(t, 1) = levels[rng() % 4];
      w(t, 2) = coin() > 0 ? 1.0f : -1.0f;
    }
    out.windows.push_back(std::move(w));
  }
  return out;
}

// class 0 constant, class 1 alternating sign at high frequency
inline Dataset separable_toy(std::size_t per_class, std::uint64_t seed) {
  Dataset ds;
  ds.num_classes = 2;
  ds.class_names = {"still", "shaking"};
  ds.sequence_length = 16;
  ds.input_dim = 3;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  std::uniform_real_distribution<float> level(-0.5f, 0.5f);
  std::int64_t id = 0;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    Datapoint dp{id++, i % 4 < 2 ? "a" : "b", i % 2, Window(16, 3)};
    const float base = level(rng);
    for (std::size_t t = 0; t < 16; ++t) {
      for (std::size_t k = 0; k < 3; ++k) {
        const float wave = dp.label == 1 ? ((t % 2) ? 1.0f : -1.0f) : 0.0f;
        dp.samples(t, k) = base + wave + noise(rng);
      }
    }
    ds.datapoints.push_back(std::move(dp));
  }
  return ds;
}

}  // namespace kdq::testing

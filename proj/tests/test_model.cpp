#include <doctest.h>

#include <cmath>
#include <random>

#include "kdq/model.hpp"
#include "support.hpp"

using namespace kdq;
using kdq::testing::random_model;
using kdq::testing::random_window;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar-loop reference of the full classifier, written against the raw
// equations with no shared helpers.
std::vector<double> oracle_forward(const Window& w, const GruMlpModel& m) {
  const auto& a = m.arch;
  const std::size_t L = a.hidden_size;
  std::vector<std::vector<double>> h(a.num_gru_layers, std::vector<double>(L, 0.0));
  for (std::size_t t = 0; t < a.sequence_length; ++t) {
    std::vector<double> x(a.input_dim);
    for (std::size_t k = 0; k < a.input_dim; ++k) x[k] = (double(w(t, k)) - m.norm_mean[k]) * m.norm_inv_std[k];
    for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
      const auto& p = m.layers[l];
      std::vector<double> hn(L);
      for (std::size_t i = 0; i < L; ++i) {
        double ar = double(p.reset.input_bias[i]) + p.reset.hidden_bias[i];
        double az = double(p.update.input_bias[i]) + p.update.hidden_bias[i];
        double an = p.candidate.input_bias[i];
        double hh = p.candidate.hidden_bias[i];
        for (std::size_t j = 0; j < x.size(); ++j) {
          ar += p.reset.input_weights(i, j) * x[j];
          az += p.update.input_weights(i, j) * x[j];
          an += p.candidate.input_weights(i, j) * x[j];
        }
        for (std::size_t j = 0; j < L; ++j) {
          ar += p.reset.hidden_weights(i, j) * h[l][j];
          az += p.update.hidden_weights(i, j) * h[l][j];
          hh += p.candidate.hidden_weights(i, j) * h[l][j];
        }
        const double r = sig(ar), z = sig(az);
        const double n = std::tanh(an + r * hh);
        hn[i] = (1 - z) * n + z * h[l][i];
      }
      h[l] = hn;
      x = hn;
    }
  }
  const std::size_t H = a.mlp_hidden();
  std::vector<double> u(H);
  for (std::size_t i = 0; i < H; ++i) {
    double s = m.mlp.hidden_bias[i];
    for (std::size_t j = 0; j < L; ++j) s += m.mlp.hidden_weights(i, j) * h.back()[j];
    u[i] = s > 0 ? s : 0;
  }
  std::vector<double> out(a.num_classes);
  for (std::size_t c = 0; c < a.num_classes; ++c) {
    double s = m.mlp.output_bias[c];
    for (std::size_t j = 0; j < H; ++j) s += m.mlp.output_weights(c, j) * u[j];
    out[c] = s;
  }
  return out;
}

}  // namespace

TEST_CASE("architecture parsing and derived sizes") {
  const Architecture a = parse_architecture("gru(1,32)");
  CHECK(a.num_gru_layers == 1);
  CHECK(a.hidden_size == 32);
  CHECK(a.mlp_hidden() == 17);
  CHECK(parse_architecture(" GRU(2, 32)-MLP ").num_gru_layers == 2);
  CHECK(parse_architecture("gru(1,64)").name() == "gru(1,64)");
  CHECK_THROWS_AS(parse_architecture("lstm(1,32)"), InvalidInput);
  CHECK_THROWS_AS(parse_architecture("gru(1,)"), InvalidInput);
  CHECK_THROWS_AS(parse_architecture("gru(3,8)"), InvalidInput);
  CHECK_THROWS_AS(parse_architecture("gru(1,0)"), InvalidInput);
}

TEST_CASE("normalize") {
  Architecture arch;
  GruMlpModel m = GruMlpModel::zeros(arch);
  const std::vector<float> a{2, 4, 6};
  CHECK(normalize<float>(a, m) == a);
  m.norm_mean = {1, 1, 1};
  m.norm_inv_std = {0.5f, 0.5f, 0.5f};
  CHECK(normalize<float>(a, m) == std::vector<float>{0.5f, 1.5f, 2.5f});
  m.norm_mean = a;
  CHECK(normalize<float>(a, m) == std::vector<float>{0, 0, 0});
}

TEST_CASE("gru_cell") {
  Architecture arch;
  arch.hidden_size = 4;
  const GruMlpModel zero = GruMlpModel::zeros(arch);
  const std::vector<float> x{0.3f, -1.0f, 2.0f};
  const std::vector<float> h{0.2f, -0.4f, 0.9f, 0.0f};
  SUBCASE("zero parameters halve the state") {
    const auto out = gru_cell<float>(x, h, zero.layers[0]);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == 0.5f * h[i]);
    const auto from_zero = gru_cell<float>(x, std::vector<float>(4, 0.0f), zero.layers[0]);
    CHECK(from_zero == std::vector<float>(4, 0.0f));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(gru_cell<float>(std::vector<float>{1.0f}, h, zero.layers[0]), InvalidInput);
  }
  SUBCASE("single step against the scalar oracle") {
    Architecture a1 = arch;
    a1.hidden_size = 2;
    a1.sequence_length = 1;
    const GruMlpModel m = random_model(a1, 21);
    const Window w = random_window(a1, 22);
    const auto ref = oracle_forward(w, m);
    const auto got = forward<float>(w, m);
    const auto h1 = gru_cell<float>(normalize<float>(w.row(0), m), std::vector<float>(2, 0.0f), m.layers[0]);
    const auto composed = mlp_head<float>(h1, m.mlp);
    for (std::size_t c = 0; c < ref.size(); ++c) {
      CHECK(got[c] == doctest::Approx(ref[c]).epsilon(1e-6));
      CHECK(composed[c] == got[c]);
    }
  }
}

TEST_CASE("forward") {
  SUBCASE("zero model yields the output bias") {
    Architecture arch;
    GruMlpModel m = GruMlpModel::zeros(arch);
    m.mlp.output_bias = {0.25f, -1.0f, 3.0f};
    const auto logits = forward<float>(random_window(arch, 1), m);
    CHECK(logits == m.mlp.output_bias);
  }
  SUBCASE("length mismatch") {
    Architecture arch;
    const GruMlpModel m = GruMlpModel::zeros(arch);
    CHECK_THROWS_AS(forward<float>(Window(arch.sequence_length + 1, 3), m), InvalidInput);
  }
  SUBCASE("random small instances match the oracle") {
    std::mt19937 rng(77);
    for (int trial = 0; trial < 60; ++trial) {
      Architecture arch;
      arch.num_gru_layers = 1 + trial % 2;
      arch.hidden_size = 1 + rng() % 4;
      arch.num_classes = 2 + rng() % 2;
      arch.sequence_length = 1 + rng() % 8;
      if (trial == 0) {
        arch.num_gru_layers = 1;
        arch.hidden_size = 3;
        arch.num_classes = 2;
        arch.sequence_length = 4;
      }
      const GruMlpModel m = random_model(arch, 100 + trial);
      const Window w = random_window(arch, 200 + trial);
      const auto ref = oracle_forward(w, m);
      const auto got = forward<float>(w, m);
      const auto got64 = forward<double>(w.cast<double>(), m.cast<double>());
      for (std::size_t c = 0; c < ref.size(); ++c) {
        CHECK(got[c] == doctest::Approx(ref[c]).epsilon(1e-6));
        CHECK(got64[c] == doctest::Approx(ref[c]).epsilon(1e-12));
      }
      std::vector<double> ref_d(ref.begin(), ref.end());
      CHECK(predict(w, m) == argmax<double>(ref_d));
    }
  }
  SUBCASE("determinism and trace consistency") {
    Architecture arch;
    arch.num_gru_layers = 2;
    arch.hidden_size = 5;
    const GruMlpModel m = random_model(arch, 9);
    const Window w = random_window(arch, 10);
    const auto a = forward<float>(w, m);
    const auto b = forward<float>(w, m);
    CHECK(a == b);
    const auto trace = forward_trace<float>(w, m);
    CHECK(trace.logits == a);
    CHECK(trace.hidden.size() == 2);
    CHECK(trace.hidden[1].size() == arch.sequence_length);
  }
}

TEST_CASE("hidden states stay inside (-1, 1)") {
  for (int trial = 0; trial < 20; ++trial) {
    Architecture arch;
    arch.num_gru_layers = 1 + trial % 2;
    arch.hidden_size = 6;
    arch.sequence_length = 40;
    const GruMlpModel m = random_model(arch, 300 + trial, 3.0f);
    const auto trace = forward_trace<double>(random_window(arch, 400 + trial).cast<double>(), m.cast<double>());
    for (const auto& layer : trace.hidden) {
      for (const auto& h : layer) {
        for (double v : h) REQUIRE(std::fabs(v) < 1.0);
      }
    }
  }
}

TEST_CASE("argmax tie-break and shift invariance") {
  CHECK(argmax<float>(std::vector<float>{0.1f, 0.9f, 0.2f}) == 1);
  CHECK(argmax<float>(std::vector<float>{0.5f, 0.5f}) == 0);
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(4);
    for (auto& x : v) x = u(rng);
    const double shift = u(rng);
    std::vector<double> s = v;
    for (auto& x : s) x += shift;
    CHECK(argmax<double>(v) == argmax<double>(s));
  }
}

TEST_CASE("parameter and multiply counts") {
  Architecture a;
  a.hidden_size = 32;
  CHECK(count_params(a) == 4173);
  Architecture tiny;
  tiny.hidden_size = 1;
  tiny.num_classes = 1;
  tiny.input_dim = 1;
  CHECK(count_params(tiny) == 18);

  Architecture a64;
  a64.hidden_size = 64;
  a64.sequence_length = 256;
  // 256 * (3 + 3*(192 + 4096) + 192) + 33*64 + 3*33
  CHECK(count_mults(a64) == 3345315);
  Architecture n0 = a64;
  n0.sequence_length = 0;
  CHECK(count_mults(n0) == 33 * 64 + 3 * 33);
  Architecture n2 = a64;
  n2.sequence_length = 512;
  CHECK(count_mults(n2) - count_mults(a64) == count_mults(a64) - count_mults(n0));

  const Architecture a32 = a;
  auto recurrent = [](const Architecture& x) { return count_params(x) - 2 * x.input_dim; };
  CHECK(recurrent(a64) > 3 * recurrent(a32));
}

TEST_CASE("instrumented forward multiplies equal count_mults") {
  for (const char* name : {"gru(1,8)", "gru(2,6)", "gru(1,32)"}) {
    Architecture base;
    base.sequence_length = 12;
    const Architecture arch = parse_architecture(name, base);
    const GruMlpModel m = random_model(arch, 5);
    const OpTally ops = measured_forward_ops(random_window(arch, 6), m);
    CHECK(ops.float_mults == count_mults(arch));
    CHECK(ops.int_mults == 0);
  }
}

TEST_CASE("model validation") {
  Architecture arch;
  GruMlpModel m = GruMlpModel::zeros(arch);
  CHECK_NOTHROW(m.validate());
  m.norm_inv_std[0] = 0.0f;
  CHECK_THROWS_AS(m.validate(), InvalidInput);
  m.norm_inv_std[0] = 1.0f;
  m.mlp.output_bias.push_back(0.0f);
  CHECK_THROWS_AS(m.validate(), InvalidInput);
  m.mlp.output_bias.pop_back();
  m.layers[0].update.hidden_weights(0, 0) = NAN;
  CHECK_THROWS_AS(m.validate(), InvalidInput);
}

#pragma once

// Float GRU-MLP classifier: a stack of uni-directional GRU layers over
// normalized triaxial samples, followed by a one-hidden-layer ReLU MLP on the
// final hidden state.
//
// Everything is templated on the scalar type so that the same code runs as
// FP32 (deployment reference), double (gradient checks) and Counted<float>
// (multiply accounting).

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdq/activations.hpp"
#include "kdq/errors.hpp"
#include "kdq/op_count.hpp"
#include "kdq/tensor.hpp"

namespace kdq {

struct Architecture {
  std::size_t num_gru_layers = 1;
  std::size_t hidden_size = 32;
  std::size_t num_classes = 3;
  std::size_t sequence_length = 64;
  std::size_t input_dim = 3;

  /// floor((L + C) / 2)
  std::size_t mlp_hidden() const { return (hidden_size + num_classes) / 2; }
  /// input width seen by GRU layer `layer`
  std::size_t layer_input(std::size_t layer) const { return layer == 0 ? input_dim : hidden_size; }

  void validate() const;
  /// "gru(layers,hidden)"
  std::string name() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Parses "gru(1,32)" (whitespace and case tolerant). Other fields come from `base`.
Architecture parse_architecture(std::string_view text, const Architecture& base = {});

/// Weights and biases feeding one gate: W_x x + b_x and W_h h + b_h.
template <typename T>
struct GateParams {
  Matrix<T> input_weights;   // L x in
  Matrix<T> hidden_weights;  // L x L
  Vector<T> input_bias;      // L
  Vector<T> hidden_bias;     // L

  friend bool operator==(const GateParams&, const GateParams&) = default;
};

template <typename T>
struct GruLayerParams {
  GateParams<T> reset;
  GateParams<T> update;
  GateParams<T> candidate;

  friend bool operator==(const GruLayerParams&, const GruLayerParams&) = default;
};

template <typename T>
struct MlpParams {
  Matrix<T> hidden_weights;  // mlp_hidden x L
  Vector<T> hidden_bias;
  Matrix<T> output_weights;  // C x mlp_hidden
  Vector<T> output_bias;

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

template <typename T>
struct BasicGruMlp {
  Architecture arch;
  Vector<T> norm_mean;
  Vector<T> norm_inv_std;
  std::vector<GruLayerParams<T>> layers;
  MlpParams<T> mlp;
  std::map<std::string, std::string> metadata;

  /// All-zero parameters, identity normalization.
  static BasicGruMlp zeros(const Architecture& arch);

  /// Visits every trainable tensor (weights and biases, not normalization)
  /// as (name, flat span) in a fixed order.
  template <typename F>
  void for_each_param(F&& f);
  template <typename F>
  void for_each_param(F&& f) const;

  template <typename U>
  BasicGruMlp<U> cast() const;

  void validate() const;

  friend bool operator==(const BasicGruMlp&, const BasicGruMlp&) = default;
};

using GruMlpModel = BasicGruMlp<float>;
/// Windows are N x input_dim sample matrices.
using Window = Matrix<float>;

std::size_t count_params(const Architecture& arch);
std::size_t count_mults(const Architecture& arch);

/// Per-timestep hidden states of every layer plus the logits.
template <typename T>
struct ForwardTrace {
  std::vector<std::vector<Vector<T>>> hidden;  // [layer][t] -> L
  Vector<T> logits;
};

template <typename T>
Vector<T> normalize(std::span<const T> sample, const BasicGruMlp<T>& model);

template <typename T>
Vector<T> gru_cell(std::span<const T> x, std::span<const T> h_prev, const GruLayerParams<T>& p,
                   ActivationMode mode = ActivationMode::kExact);

template <typename T>
Vector<T> mlp_head(std::span<const T> h, const MlpParams<T>& p);

template <typename T>
ForwardTrace<T> forward_trace(const Matrix<T>& window, const BasicGruMlp<T>& model,
                              ActivationMode mode = ActivationMode::kExact);

template <typename T>
Vector<T> forward(const Matrix<T>& window, const BasicGruMlp<T>& model,
                  ActivationMode mode = ActivationMode::kExact);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::size_t predict(const Window& window, const GruMlpModel& model,
                    ActivationMode mode = ActivationMode::kExact);

/// Multiplies tallied by running forward with instrumented arithmetic.
OpTally measured_forward_ops(const Window& window, const GruMlpModel& model);

// ---------------------------------------------------------------------------

template <typename T>
BasicGruMlp<T> BasicGruMlp<T>::zeros(const Architecture& arch) {
  arch.validate();
  BasicGruMlp m;
  m.arch = arch;
  m.norm_mean.assign(arch.input_dim, T(0));
  m.norm_inv_std.assign(arch.input_dim, T(1));
  const std::size_t L = arch.hidden_size;
  for (std::size_t l = 0; l < arch.num_gru_layers; ++l) {
    const std::size_t in = arch.layer_input(l);
    GruLayerParams<T> layer;
    for (GateParams<T>* g : {&layer.reset, &layer.update, &layer.candidate}) {
      g->input_weights = Matrix<T>(L, in);
      g->hidden_weights = Matrix<T>(L, L);
      g->input_bias.assign(L, T(0));
      g->hidden_bias.assign(L, T(0));
    }
    m.layers.push_back(std::move(layer));
  }
  const std::size_t H = arch.mlp_hidden();
  m.mlp.hidden_weights = Matrix<T>(H, L);
  m.mlp.hidden_bias.assign(H, T(0));
  m.mlp.output_weights = Matrix<T>(arch.num_classes, H);
  m.mlp.output_bias.assign(arch.num_classes, T(0));
  return m;
}

namespace detail {

template <typename Model, typename F>
void visit_params(Model& m, F&& f) {
  auto span_of = [](auto& c) { return std::span(c.data(), c.size()); };
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const std::string p = "gru" + std::to_string(l) + ".";
    const std::pair<const char*, decltype(&layer.reset)> gates[] = {
        {"reset", &layer.reset}, {"update", &layer.update}, {"candidate", &layer.candidate}};
    for (const auto& [gname, g] : gates) {
      f(p + gname + ".input_weights", span_of(g->input_weights.data));
      f(p + gname + ".hidden_weights", span_of(g->hidden_weights.data));
      f(p + gname + ".input_bias", span_of(g->input_bias));
      f(p + gname + ".hidden_bias", span_of(g->hidden_bias));
    }
  }
  f(std::string("mlp.hidden_weights"), span_of(m.mlp.hidden_weights.data));
  f(std::string("mlp.hidden_bias"), span_of(m.mlp.hidden_bias));
  f(std::string("mlp.output_weights"), span_of(m.mlp.output_weights.data));
  f(std::string("mlp.output_bias"), span_of(m.mlp.output_bias));
}

}  // namespace detail

template <typename T>
template <typename F>
void BasicGruMlp<T>::for_each_param(F&& f) {
  detail::visit_params(*this, f);
}

template <typename T>
template <typename F>
void BasicGruMlp<T>::for_each_param(F&& f) const {
  detail::visit_params(*this, f);
}

template <typename T>
template <typename U>
BasicGruMlp<U> BasicGruMlp<T>::cast() const {
  BasicGruMlp<U> out;
  out.arch = arch;
  out.norm_mean = cast_vector<U>(norm_mean);
  out.norm_inv_std = cast_vector<U>(norm_inv_std);
  out.metadata = metadata;
  auto cast_gate = [](const GateParams<T>& g) {
    return GateParams<U>{g.input_weights.template cast<U>(), g.hidden_weights.template cast<U>(),
                         cast_vector<U>(g.input_bias), cast_vector<U>(g.hidden_bias)};
  };
  for (const auto& layer : layers) {
    out.layers.push_back({cast_gate(layer.reset), cast_gate(layer.update), cast_gate(layer.candidate)});
  }
  out.mlp = {mlp.hidden_weights.template cast<U>(), cast_vector<U>(mlp.hidden_bias),
             mlp.output_weights.template cast<U>(), cast_vector<U>(mlp.output_bias)};
  return out;
}

template <typename T>
void BasicGruMlp<T>::validate() const {
  arch.validate();
  auto fail = [](const std::string& what) { throw InvalidInput("model: " + what); };
  if (norm_mean.size() != arch.input_dim || norm_inv_std.size() != arch.input_dim) {
    fail("normalization vectors must have input_dim entries");
  }
  for (std::size_t i = 0; i < arch.input_dim; ++i) {
    if (!(norm_inv_std[i] > T(0))) fail("normalization inverse std must be positive");
  }
  if (layers.size() != arch.num_gru_layers) fail("layer count does not match architecture");
  const std::size_t L = arch.hidden_size;
  auto check_matrix = [&](const Matrix<T>& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows != r || m.cols != c || m.data.size() != r * c) fail(std::string("bad shape for ") + name);
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const GateParams<T>* g : {&layers[l].reset, &layers[l].update, &layers[l].candidate}) {
      check_matrix(g->input_weights, L, arch.layer_input(l), "gate input weights");
      check_matrix(g->hidden_weights, L, L, "gate hidden weights");
      if (g->input_bias.size() != L || g->hidden_bias.size() != L) fail("bad gate bias length");
    }
  }
  check_matrix(mlp.hidden_weights, arch.mlp_hidden(), L, "mlp hidden weights");
  check_matrix(mlp.output_weights, arch.num_classes, arch.mlp_hidden(), "mlp output weights");
  if (mlp.hidden_bias.size() != arch.mlp_hidden() || mlp.output_bias.size() != arch.num_classes) {
    fail("bad mlp bias length");
  }
  for_each_param([&](const std::string& name, auto values) {
    for (const auto& v : values) {
      if (!isfinite(v)) fail("non-finite value in " + name);
    }
  });
}

template <typename T>
Vector<T> normalize(std::span<const T> sample, const BasicGruMlp<T>& model) {
  Vector<T> out(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    out[i] = (sample[i] - model.norm_mean[i]) * model.norm_inv_std[i];
  }
  return out;
}

template <typename T>
Vector<T> gru_cell(std::span<const T> x, std::span<const T> h_prev, const GruLayerParams<T>& p,
                   ActivationMode mode) {
  const std::size_t L = p.reset.hidden_weights.rows;
  if (x.size() != p.reset.input_weights.cols || h_prev.size() != L) {
    throw InvalidInput("gru_cell: input or state length does not match layer shape");
  }
  Vector<T> r = p.reset.input_bias;
  Vector<T> z = p.update.input_bias;
  Vector<T> n = p.candidate.input_bias;
  Vector<T> hn = p.candidate.hidden_bias;
  matvec_add<T>(p.reset.input_weights, x, r);
  matvec_add<T>(p.reset.hidden_weights, h_prev, r);
  matvec_add<T>(p.update.input_weights, x, z);
  matvec_add<T>(p.update.hidden_weights, h_prev, z);
  matvec_add<T>(p.candidate.input_weights, x, n);
  matvec_add<T>(p.candidate.hidden_weights, h_prev, hn);
  Vector<T> h(L);
  for (std::size_t i = 0; i < L; ++i) {
    const T ri = activate_sigmoid(r[i] + p.reset.hidden_bias[i], mode);
    const T zi = activate_sigmoid(z[i] + p.update.hidden_bias[i], mode);
    const T ni = activate_tanh(n[i] + ri * hn[i], mode);
    h[i] = (T(1) - zi) * ni + zi * h_prev[i];
  }
  return h;
}

template <typename T>
Vector<T> mlp_head(std::span<const T> h, const MlpParams<T>& p) {
  Vector<T> u = p.hidden_bias;
  matvec_add<T>(p.hidden_weights, h, u);
  for (auto& v : u) {
    if (v < T(0)) v = T(0);
  }
  Vector<T> logits = p.output_bias;
  matvec_add<T>(p.output_weights, std::span<const T>(u), logits);
  return logits;
}

template <typename T>
ForwardTrace<T> forward_trace(const Matrix<T>& window, const BasicGruMlp<T>& model,
                              ActivationMode mode) {
  const Architecture& a = model.arch;
  if (window.rows != a.sequence_length || window.cols != a.input_dim) {
    throw InvalidInput("forward: window is " + std::to_string(window.rows) + "x" +
                       std::to_string(window.cols) + ", model expects " +
                       std::to_string(a.sequence_length) + "x" + std::to_string(a.input_dim));
  }
  ForwardTrace<T> trace;
  trace.hidden.assign(a.num_gru_layers, {});
  std::vector<Vector<T>> state(a.num_gru_layers, Vector<T>(a.hidden_size, T(0)));
  for (std::size_t t = 0; t < a.sequence_length; ++t) {
    Vector<T> x = normalize<T>(window.row(t), model);
    for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
      state[l] = gru_cell<T>(x, state[l], model.layers[l], mode);
      trace.hidden[l].push_back(state[l]);
      x = state[l];
    }
  }
  const Vector<T>& top = a.num_gru_layers ? state.back() : Vector<T>{};
  trace.logits = mlp_head<T>(top, model.mlp);
  return trace;
}

template <typename T>
Vector<T> forward(const Matrix<T>& window, const BasicGruMlp<T>& model, ActivationMode mode) {
  const Architecture& a = model.arch;
  if (window.rows != a.sequence_length || window.cols != a.input_dim) {
    throw InvalidInput("forward: window is " + std::to_string(window.rows) + "x" +
                       std::to_string(window.cols) + ", model expects " +
                       std::to_string(a.sequence_length) + "x" + std::to_string(a.input_dim));
  }
  std::vector<Vector<T>> state(a.num_gru_layers, Vector<T>(a.hidden_size, T(0)));
  for (std::size_t t = 0; t < a.sequence_length; ++t) {
    Vector<T> x = normalize<T>(window.row(t), model);
    for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
      state[l] = gru_cell<T>(x, state[l], model.layers[l], mode);
      x = state[l];
    }
  }
  return mlp_head<T>(state.back(), model.mlp);
}

}  // namespace kdq

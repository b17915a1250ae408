#pragma once

// Dynamically quantized GRU-MLP. Weight matrices are int8 with one scale per
// tensor; every matrix-vector product runs in Q7 integer arithmetic while
// biases, gate arithmetic and the carried hidden state stay FP32.
//
// Input scales: s_a for the normalized samples entering layer 0, s_h for any
// hidden state (recurrent inputs, inputs of layer 2, the MLP input h_N) and
// s_m for the ReLU output entering the last MLP layer.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdq/data.hpp"
#include "kdq/fxp.hpp"
#include "kdq/model.hpp"

namespace kdq {

struct InputScales {
  float s_a = 1.0f;
  float s_h = 1.0f;
  float s_m = 1.0f;

  void validate() const;  // powers of two
  friend bool operator==(const InputScales&, const InputScales&) = default;
};

struct QGate {
  Q7Matrix input_weights;
  Q7Matrix hidden_weights;
  Vector<float> input_bias;
  Vector<float> hidden_bias;
  float input_rescale = 0;   // 2^7 * s_in * s_W
  float hidden_rescale = 0;  // 2^7 * s_h * s_W

  friend bool operator==(const QGate&, const QGate&) = default;
};

struct QGruLayer {
  QGate reset;
  QGate update;
  QGate candidate;

  friend bool operator==(const QGruLayer&, const QGruLayer&) = default;
};

struct QMlp {
  Q7Matrix hidden_weights;
  Vector<float> hidden_bias;
  Q7Matrix output_weights;
  Vector<float> output_bias;
  float hidden_rescale = 0;  // input h_N, scale s_h
  float output_rescale = 0;  // input relu output, scale s_m

  friend bool operator==(const QMlp&, const QMlp&) = default;
};

struct QuantizedGruMlpModel {
  Architecture arch;
  Vector<float> norm_mean;
  Vector<float> norm_inv_std;
  std::vector<QGruLayer> layers;
  QMlp mlp;
  InputScales scales;
  std::map<std::string, std::string> metadata;

  float layer_input_scale(std::size_t layer) const { return layer == 0 ? scales.s_a : scales.s_h; }

  /// Shapes, power-of-two scales and rescale consistency. Throws InvalidInput.
  void validate() const;

  friend bool operator==(const QuantizedGruMlpModel&, const QuantizedGruMlpModel&) = default;
};

QuantizedGruMlpModel quantize_model(const GruMlpModel& model, const InputScales& scales = {});

/// Same weights with new input scales and recomputed rescale factors.
QuantizedGruMlpModel with_scales(QuantizedGruMlpModel qmodel, const InputScales& scales);

/// Float model whose weights are scale * q. Biases and normalization copied.
GruMlpModel dequantize(const QuantizedGruMlpModel& qmodel);

struct QForwardTrace {
  std::vector<std::vector<Vector<float>>> hidden;  // [layer][t]
  Vector<float> logits;
};

Vector<float> q_forward(const Window& window, const QuantizedGruMlpModel& qmodel,
                        ActivationMode mode = ActivationMode::kApprox);
QForwardTrace q_forward_trace(const Window& window, const QuantizedGruMlpModel& qmodel,
                              ActivationMode mode = ActivationMode::kApprox);
std::size_t q_predict(const Window& window, const QuantizedGruMlpModel& qmodel,
                      ActivationMode mode = ActivationMode::kApprox);

struct QOpCounts {
  std::uint64_t float_mults = 0;         // whole forward pass
  std::uint64_t int_mults = 0;           // whole forward pass
  std::uint64_t kernel_float_mults = 0;  // inside q7_matvec calls only
  std::uint64_t kernel_int_mults = 0;
  Vector<float> logits;
};

/// Runs q_forward with instrumented arithmetic; the logits equal q_forward's.
QOpCounts q_forward_ops(const Window& window, const QuantizedGruMlpModel& qmodel,
                        ActivationMode mode = ActivationMode::kApprox);

inline constexpr int kScaleGridMinLog2 = -3;
inline constexpr int kScaleGridMaxLog2 = 3;

struct TuneResult {
  InputScales scales;
  double objective = 0;        // MCC, or minus the logit MSE in fallback mode
  bool mse_fallback = false;   // calibration set had a single class
  double input_saturation = 0; // share of layer-0 input quanta clipped at the chosen s_a
  std::size_t evaluated = 0;   // grid points scored
};

/// Exhaustive search over {2^-3, ..., 2^3}^3 maximizing multiclass MCC of the
/// quantized model on the calibration ids. Ties keep the lexicographically
/// smallest (s_a, s_h, s_m).
TuneResult tune_input_scales(const GruMlpModel& model, const Dataset& dataset,
                             std::span<const std::int64_t> calibration_ids);

/// Share of to_q7 conversions of normalized inputs that saturate at s_a.
double input_saturation_rate(const GruMlpModel& model, const Dataset& dataset,
                             std::span<const std::int64_t> ids, float s_a);

// Packed little-endian parameter images.
//
//   header (16 B): magic[4] | u16 version | u16 layers | u16 hidden | u16 classes
//                  | u16 sequence_length | u16 input_dim
//   "KDQ7": f32 s_a, s_h, s_m | f32 norm_mean[D] | f32 norm_inv_std[D]
//           | per layer, per gate (reset, update, candidate):
//               f32 s_Wx, i8 W_x[L*in] | f32 s_Wh, i8 W_h[L*L] | f32 b_x[L] | f32 b_h[L]
//           | f32 s_W1, i8 W1 | f32 b1 | f32 s_W2, i8 W2 | f32 b2
//   "KDFP": f32 norm_mean[D] | f32 norm_inv_std[D] | every weight and bias as f32
//           in the same order
inline constexpr std::uint16_t kRodataVersion = 1;

std::vector<std::uint8_t> export_rodata(const QuantizedGruMlpModel& qmodel);
QuantizedGruMlpModel import_rodata(std::span<const std::uint8_t> image);
std::vector<std::uint8_t> export_rodata_fp32(const GruMlpModel& model);
GruMlpModel import_rodata_fp32(std::span<const std::uint8_t> image);

std::size_t rodata_size_q7(const Architecture& arch);
std::size_t rodata_size_fp32(const Architecture& arch);

}  // namespace kdq

#pragma once

// Losses, reverse-mode gradients through the GRU-MLP, and the mini-batch
// optimization loop used for both plain and distilled training.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdq/data.hpp"
#include "kdq/errors.hpp"
#include "kdq/model.hpp"
#include "kdq/soft_labels.hpp"

namespace kdq {

struct KdConfig {
  double alpha = 0.1;
  double temperature = 3.0;

  void validate() const;
};

enum class OptimizerKind { kAdam, kSgdMomentum };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double momentum = 0.9;  // sgd only
  double clip_norm = 5.0;

  void validate() const;
};

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

/// Temperature softmax with max subtraction.
template <typename T>
Vector<T> softmax_t(std::span<const T> logits, double t) {
  if (!(t > 0)) throw InvalidInput("softmax_t: temperature must be positive");
  Vector<T> out(logits.size());
  if (logits.empty()) return out;
  T mx = logits[0];
  for (const T& v : logits) {
    if (v > mx) mx = v;
  }
  T sum(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = exp((logits[i] - mx) / T(t));
    sum += out[i];
  }
  for (auto& v : out) v = v / sum;
  return out;
}

namespace detail {

// log softmax_t, stable
template <typename T>
Vector<T> log_softmax_t(std::span<const T> logits, double t) {
  T mx = logits[0];
  for (const T& v : logits) {
    if (v > mx) mx = v;
  }
  T sum(0);
  for (const T& v : logits) sum += exp((v - mx) / T(t));
  const T lse = log(sum);
  Vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - mx) / T(t) - lse;
  return out;
}

}  // namespace detail

/// Cross entropy against the one-hot label.
template <typename T>
T hard_loss(std::span<const T> logits, std::size_t label) {
  if (label >= logits.size()) throw InvalidInput("hard_loss: label out of range");
  return -detail::log_softmax_t<T>(logits, 1.0)[label];
}

/// Cross entropy between the temperature-t softmaxes of teacher and student.
template <typename T>
T soft_loss(std::span<const T> student, std::span<const T> teacher, double t) {
  if (student.size() != teacher.size() || student.empty()) {
    throw InvalidInput("soft_loss: student and teacher logit lengths differ");
  }
  const Vector<T> p = softmax_t<T>(teacher, t);
  const Vector<T> lq = detail::log_softmax_t<T>(student, t);
  T out(0);
  for (std::size_t i = 0; i < p.size(); ++i) out -= p[i] * lq[i];
  return out;
}

/// alpha * l_h + (1 - alpha) * t^2 * l_s
template <typename T>
T kd_loss(std::span<const T> student, std::size_t label, std::span<const T> teacher, const KdConfig& cfg) {
  const T lh = hard_loss<T>(student, label);
  if (cfg.alpha == 1.0) return lh;
  const T ls = soft_loss<T>(student, teacher, cfg.temperature);
  const double t2 = cfg.temperature * cfg.temperature;
  return T(cfg.alpha) * lh + T((1.0 - cfg.alpha) * t2) * ls;
}

/// One supervised example. `teacher` is null for plain training.
struct TrainExample {
  const Window* window = nullptr;
  std::size_t label = 0;
  const Vector<float>* teacher = nullptr;
};

/// Same-shaped container for parameter gradients. Normalization entries stay
/// zero: the statistics are frozen.
template <typename T>
using Gradients = BasicGruMlp<T>;

/// Mean loss over the batch; `grads` is overwritten with the gradient of that
/// mean. Examples with a teacher use kd_loss, others hard_loss; alpha == 1
/// ignores teachers entirely. Exact activations throughout.
template <typename T>
T backward(std::span<const TrainExample> batch, const BasicGruMlp<T>& model, const KdConfig& kd,
           Gradients<T>& grads);

/// Seeded uniform(-1/sqrt(L), 1/sqrt(L)) weights, zero biases.
GruMlpModel init_model(const Architecture& arch, std::uint64_t seed);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0;
  std::optional<double> val_mcc;
  double wall_ms = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainRequest {
  const Dataset* dataset = nullptr;
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> validation_ids;  // optional, only for logging
  Architecture arch;                         // layers and hidden size; other dims come from the dataset
  TrainConfig config;
  KdConfig kd;
  const SoftLabelSet* soft_labels = nullptr;  // KD when set and alpha < 1
};

/// Trains from the seeded initialization with normalization frozen to the
/// training split's statistics. Throws DataContractError when soft labels
/// miss a training id and TrainingError on a non-finite loss.
GruMlpModel train(const TrainRequest& request, const EpochCallback& on_epoch = {});

/// Multiclass MCC of `model` on the given ids.
double evaluate_mcc(const GruMlpModel& model, const Dataset& dataset, std::span<const std::int64_t> ids);

}  // namespace kdq

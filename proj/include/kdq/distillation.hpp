#pragma once

// Two-step distillation: record a teacher's logits on the training split,
// then train a student against them together with the hard labels.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "kdq/data.hpp"
#include "kdq/model.hpp"
#include "kdq/qmodel.hpp"
#include "kdq/soft_labels.hpp"
#include "kdq/training.hpp"

namespace kdq {

/// Anything that maps a raw window to C logits. `logits` must be safe to call
/// concurrently.
struct Teacher {
  std::size_t num_classes = 0;
  std::function<Vector<float>(const Window&)> logits;
  std::string description;
};

/// Exact-activation float forward pass of a copy of `model`.
Teacher make_teacher(const GruMlpModel& model, std::string description = {});
/// Quantized forward pass with approximate activations.
Teacher make_teacher(const QuantizedGruMlpModel& qmodel, std::string description = {});

/// One raw logit vector per id, computed on up to `threads` workers (0 means
/// hardware concurrency). The result does not depend on the thread count.
SoftLabelSet generate_soft_labels(const Teacher& teacher, const Dataset& dataset,
                                  std::span<const std::int64_t> ids, std::size_t threads = 0);
SoftLabelSet generate_soft_labels(const GruMlpModel& teacher, const Dataset& dataset,
                                  std::span<const std::int64_t> ids, std::size_t threads = 0);

/// train() with KD against `request.soft_labels`, which must be set and cover
/// every training id. Adds kd_alpha, kd_temperature and teacher metadata.
GruMlpModel distill(const TrainRequest& request, const EpochCallback& on_epoch = {});

struct SelfDistillResult {
  GruMlpModel first_generation;
  SoftLabelSet soft_labels;
  GruMlpModel student;
};

/// Plain training, soft labels from that model on the training ids, then a
/// fresh student of the same architecture and seed distilled from them.
/// `request.soft_labels` is ignored.
SelfDistillResult self_distill(const TrainRequest& request, const EpochCallback& on_epoch = {});

/// Second half of self_distill for callers that already hold generation one.
SelfDistillResult self_distill_from(GruMlpModel first_generation, const TrainRequest& request,
                                    const EpochCallback& on_epoch = {});

}  // namespace kdq

#pragma once

// Leave-one-animal-out evaluation of a teacher and its students (no KD, KD,
// self KD), each scored in float and after Q7 quantization with tuned input
// scales. Validation predictions are pooled over folds before computing MCC.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdq/data.hpp"
#include "kdq/metrics.hpp"
#include "kdq/model.hpp"
#include "kdq/qmodel.hpp"
#include "kdq/training.hpp"

namespace kdq {

struct CvConfig {
  Architecture teacher = parse_architecture("gru(1,32)");
  Architecture student = parse_architecture("gru(1,8)");
  TrainConfig teacher_train;
  TrainConfig student_train;
  KdConfig kd;
  bool run_teacher = true;  // required by run_kd
  bool run_kd = true;
  bool run_self_kd = true;
  bool quantize = true;
  /// Scale tuning uses every k-th training id so that at most this many are
  /// scored per grid point; 0 keeps the whole training split.
  std::size_t calibration_limit = 0;
  /// Folds run concurrently on up to this many threads; results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
};

struct VariantOutcome {
  std::string name;  // teacher, no_kd, kd, self_kd
  std::vector<FoldPredictions> float_folds;
  std::vector<FoldPredictions> quant_folds;  // empty unless quantized
  std::vector<InputScales> fold_scales;
  ConfusionMatrix float_cm;
  ConfusionMatrix quant_cm;
  double float_mcc = 0;
  double quant_mcc = 0;
};

struct CvResult {
  std::vector<std::string> animals;  // fold order
  std::vector<VariantOutcome> variants;

  const VariantOutcome& variant(const std::string& name) const;
};

struct CvProgress {
  std::size_t fold = 0;  // 0-based
  std::string animal;
  std::string stage;
};

CvResult run_loao_cv(const Dataset& dataset, const CvConfig& config,
                     const std::function<void(const CvProgress&)>& progress = {});

/// Every k-th id, k chosen so that at most `limit` remain (0 keeps all).
std::vector<std::int64_t> calibration_subset(const std::vector<std::int64_t>& ids, std::size_t limit);

/// {folds: [...], variants: {name: {float: report, quantized: report, scales: [...]}}}
nlohmann::json cv_report(const CvResult& result, const std::vector<std::string>& class_names);

}  // namespace kdq

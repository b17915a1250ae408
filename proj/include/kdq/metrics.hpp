#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace kdq {

/// C x C counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0)
      : num_classes_(num_classes), counts_(num_classes * num_classes, 0) {}

  std::size_t num_classes() const { return num_classes_; }
  std::int64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * num_classes_ + pred]; }
  void add(std::size_t truth, std::size_t pred, std::int64_t n = 1);
  std::int64_t total() const;

  std::vector<std::vector<std::int64_t>> rows() const;
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows);

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t num_classes_;
  std::vector<std::int64_t> counts_;
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t num_classes);

/// Gorodkin's R_K statistic over the full matrix. 0 when a radicand vanishes.
double mcc_multiclass(const ConfusionMatrix& cm);

/// Binary MCC from the four cells. 0 when any marginal is empty.
double mcc_binary(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn);
double mcc_binary(const ConfusionMatrix& cm2);

/// One-vs-rest binary MCC for every class.
std::vector<double> per_class_mcc(const ConfusionMatrix& cm);

struct FoldPredictions {
  std::vector<std::int64_t> ids;
  std::vector<std::size_t> preds;
  std::vector<std::size_t> labels;
};

/// Pools validation predictions of all folds into one matrix. Fails if a
/// datapoint id appears in more than one fold.
ConfusionMatrix aggregate_folds(std::span<const FoldPredictions> folds, std::size_t num_classes);

/// {mcc_multiclass, per_class: {name: mcc}, confusion: [[...]], n}
nlohmann::json metrics_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

}  // namespace kdq

#include "kdq/metrics.hpp"

#include <cmath>
#include <unordered_set>

#include "kdq/errors.hpp"

namespace kdq {

void ConfusionMatrix::add(std::size_t truth, std::size_t pred, std::int64_t n) {
  if (truth >= num_classes_ || pred >= num_classes_) {
    throw InvalidInput("confusion: class index out of range");
  }
  counts_[truth * num_classes_ + pred] += n;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::vector<std::vector<std::int64_t>> ConfusionMatrix::rows() const {
  std::vector<std::vector<std::int64_t>> out(num_classes_);
  for (std::size_t i = 0; i < num_classes_; ++i) {
    out[i].assign(counts_.begin() + static_cast<std::ptrdiff_t>(i * num_classes_),
                  counts_.begin() + static_cast<std::ptrdiff_t>((i + 1) * num_classes_));
  }
  return out;
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw InvalidInput("confusion matrix must be square");
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (rows[i][j] < 0) throw InvalidInput("confusion counts must be non-negative");
      cm.add(i, j, rows[i][j]);
    }
  }
  return cm;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw InvalidInput("confusion: class count mismatch");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  return *this;
}

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t num_classes) {
  if (preds.size() != labels.size()) throw InvalidInput("confusion: predictions and labels differ in length");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(labels[i], preds[i]);
  return cm;
}

double mcc_multiclass(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes();
  const double s = static_cast<double>(cm.total());
  if (s <= 0) throw InvalidInput("mcc_multiclass: empty confusion matrix");
  double c = 0, tp_sum = 0, p2 = 0, t2 = 0;
  for (std::size_t k = 0; k < C; ++k) {
    c += static_cast<double>(cm.at(k, k));
    double t = 0, p = 0;
    for (std::size_t j = 0; j < C; ++j) {
      t += static_cast<double>(cm.at(k, j));
      p += static_cast<double>(cm.at(j, k));
    }
    tp_sum += t * p;
    p2 += p * p;
    t2 += t * t;
  }
  const double a = s * s - p2;
  const double b = s * s - t2;
  if (a == 0 || b == 0) return 0.0;
  return (c * s - tp_sum) / std::sqrt(a * b);
}

double mcc_binary(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  const double den = static_cast<double>(tp + fp) * static_cast<double>(tp + fn) *
                     static_cast<double>(tn + fp) * static_cast<double>(tn + fn);
  if (den == 0) return 0.0;
  return (static_cast<double>(tp) * static_cast<double>(tn) - static_cast<double>(fp) * static_cast<double>(fn)) /
         std::sqrt(den);
}

double mcc_binary(const ConfusionMatrix& cm2) {
  if (cm2.num_classes() != 2) throw InvalidInput("mcc_binary: expected a 2x2 matrix");
  // class 1 is "positive"
  return mcc_binary(cm2.at(1, 1), cm2.at(0, 1), cm2.at(1, 0), cm2.at(0, 0));
}

std::vector<double> per_class_mcc(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes();
  const std::int64_t n = cm.total();
  std::vector<double> out(C);
  for (std::size_t k = 0; k < C; ++k) {
    std::int64_t row = 0, col = 0;
    for (std::size_t j = 0; j < C; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::int64_t tp = cm.at(k, k);
    const std::int64_t fn = row - tp;
    const std::int64_t fp = col - tp;
    out[k] = mcc_binary(tp, fp, fn, n - tp - fn - fp);
  }
  return out;
}

ConfusionMatrix aggregate_folds(std::span<const FoldPredictions> folds, std::size_t num_classes) {
  ConfusionMatrix pooled(num_classes);
  std::unordered_set<std::int64_t> seen;
  for (const auto& fold : folds) {
    if (fold.ids.size() != fold.preds.size() || fold.preds.size() != fold.labels.size()) {
      throw InvalidInput("aggregate_folds: ragged fold predictions");
    }
    for (auto id : fold.ids) {
      if (!seen.insert(id).second) {
        throw InvalidInput("aggregate_folds: datapoint " + std::to_string(id) + " appears in more than one fold");
      }
    }
    pooled += confusion(fold.preds, fold.labels, num_classes);
  }
  return pooled;
}

nlohmann::json metrics_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  nlohmann::json report;
  report["mcc_multiclass"] = cm.total() > 0 ? mcc_multiclass(cm) : 0.0;
  const auto per_class = per_class_mcc(cm);
  nlohmann::json pc = nlohmann::json::object();
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const std::string name = k < class_names.size() ? class_names[k] : "class_" + std::to_string(k);
    pc[name] = per_class[k];
  }
  report["per_class"] = pc;
  report["confusion"] = cm.rows();
  report["n"] = cm.total();
  return report;
}

}  // namespace kdq

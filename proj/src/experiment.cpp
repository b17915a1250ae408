#include "kdq/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

#include "kdq/distillation.hpp"
#include "kdq/errors.hpp"

namespace kdq {

void CvConfig::validate() const {
  teacher.validate();
  student.validate();
  teacher_train.validate();
  student_train.validate();
  kd.validate();
  if (run_kd && !run_teacher) throw InvalidInput("cv: KD needs the teacher");
  if (threads == 0) throw InvalidInput("cv: threads must be positive");
}

const VariantOutcome& CvResult::variant(const std::string& name) const {
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  throw InvalidInput("cv result has no variant '" + name + "'");
}

std::vector<std::int64_t> calibration_subset(const std::vector<std::int64_t>& ids, std::size_t limit) {
  if (limit == 0 || ids.size() <= limit) return ids;
  const std::size_t stride = (ids.size() + limit - 1) / limit;
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < ids.size(); i += stride) out.push_back(ids[i]);
  return out;
}

namespace {

struct FoldVariant {
  FoldPredictions float_preds;
  FoldPredictions quant_preds;
  bool quantized = false;
  InputScales scales;
};

struct FoldOutcome {
  std::vector<std::pair<std::string, FoldVariant>> variants;
};

FoldPredictions predict_fold(const Dataset& ds, const std::vector<std::int64_t>& ids,
                             const std::function<std::size_t(const Window&)>& classify) {
  FoldPredictions p;
  for (std::int64_t id : ids) {
    const Datapoint& dp = ds.by_id(id);
    p.ids.push_back(id);
    p.preds.push_back(classify(dp.samples));
    p.labels.push_back(dp.label);
  }
  return p;
}

FoldOutcome run_fold(const Dataset& ds, const Fold& fold, const CvConfig& cfg,
                     const std::function<void(const std::string&)>& stage) {
  FoldOutcome out;
  const std::vector<std::int64_t> calib = calibration_subset(fold.train_ids, cfg.calibration_limit);

  auto score = [&](const std::string& name, const GruMlpModel& m) {
    FoldVariant v;
    v.float_preds = predict_fold(ds, fold.validation_ids, [&](const Window& w) { return predict(w, m); });
    if (cfg.quantize) {
      stage(name + ": tuning scales");
      const TuneResult tuned = tune_input_scales(m, ds, calib);
      const QuantizedGruMlpModel qm = quantize_model(m, tuned.scales);
      v.scales = tuned.scales;
      v.quantized = true;
      v.quant_preds = predict_fold(ds, fold.validation_ids, [&](const Window& w) { return q_predict(w, qm); });
    }
    out.variants.emplace_back(name, std::move(v));
  };

  auto request = [&](const Architecture& arch, const TrainConfig& tc) {
    TrainRequest r;
    r.dataset = &ds;
    r.train_ids = fold.train_ids;
    r.arch = arch;
    r.config = tc;
    r.kd = cfg.kd;
    return r;
  };

  std::optional<GruMlpModel> teacher;
  if (cfg.run_teacher) {
    stage("teacher: training");
    teacher = train(request(cfg.teacher, cfg.teacher_train));
    score("teacher", *teacher);
  }

  stage("no_kd: training");
  const TrainRequest student_req = request(cfg.student, cfg.student_train);
  GruMlpModel plain = train(student_req);
  score("no_kd", plain);

  if (cfg.run_kd) {
    stage("kd: training");
    const SoftLabelSet soft = generate_soft_labels(*teacher, ds, fold.train_ids, 1);
    TrainRequest r = student_req;
    r.soft_labels = &soft;
    score("kd", distill(r));
  }

  if (cfg.run_self_kd) {
    stage("self_kd: training");
    const SelfDistillResult self = self_distill_from(std::move(plain), student_req);
    score("self_kd", self.student);
  }
  return out;
}

}  // namespace

CvResult run_loao_cv(const Dataset& dataset, const CvConfig& config,
                     const std::function<void(const CvProgress&)>& progress) {
  config.validate();
  dataset.validate();
  const std::vector<Fold> folds = loao_splits(dataset);
  if (folds.size() < 2) throw DataContractError("leave-one-animal-out needs at least two animals");

  std::vector<FoldOutcome> outcomes(folds.size());
  std::mutex progress_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;

  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < folds.size();) {
      try {
        auto stage = [&](const std::string& s) {
          if (!progress) return;
          std::lock_guard lock(progress_mutex);
          progress({i, folds[i].animal_id, s});
        };
        outcomes[i] = run_fold(dataset, folds[i], config, stage);
      } catch (...) {
        std::lock_guard lock(progress_mutex);
        if (!failure) failure = std::current_exception();
        next = folds.size();
      }
    }
  };
  const std::size_t workers = std::min(config.threads, folds.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < workers; ++k) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  CvResult result;
  for (const Fold& f : folds) result.animals.push_back(f.animal_id);
  for (std::size_t k = 0; k < outcomes.front().variants.size(); ++k) {
    VariantOutcome v;
    v.name = outcomes.front().variants[k].first;
    for (const FoldOutcome& o : outcomes) {
      const FoldVariant& fv = o.variants[k].second;
      v.float_folds.push_back(fv.float_preds);
      if (fv.quantized) {
        v.quant_folds.push_back(fv.quant_preds);
        v.fold_scales.push_back(fv.scales);
      }
    }
    v.float_cm = aggregate_folds(v.float_folds, dataset.num_classes);
    v.float_mcc = mcc_multiclass(v.float_cm);
    if (!v.quant_folds.empty()) {
      v.quant_cm = aggregate_folds(v.quant_folds, dataset.num_classes);
      v.quant_mcc = mcc_multiclass(v.quant_cm);
    }
    result.variants.push_back(std::move(v));
  }
  return result;
}

nlohmann::json cv_report(const CvResult& result, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["folds"] = result.animals;
  nlohmann::json variants = nlohmann::json::object();
  for (const auto& v : result.variants) {
    nlohmann::json e;
    e["float"] = metrics_report(v.float_cm, class_names);
    if (!v.quant_folds.empty()) {
      e["quantized"] = metrics_report(v.quant_cm, class_names);
      nlohmann::json scales = nlohmann::json::array();
      for (std::size_t i = 0; i < v.fold_scales.size(); ++i) {
        scales.push_back({{"fold", result.animals[i]},
                          {"s_a", v.fold_scales[i].s_a},
                          {"s_h", v.fold_scales[i].s_h},
                          {"s_m", v.fold_scales[i].s_m}});
      }
      e["scales"] = std::move(scales);
    }
    variants[v.name] = std::move(e);
  }
  j["variants"] = std::move(variants);
  return j;
}

}  // namespace kdq

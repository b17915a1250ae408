#include "kdq/distillation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "kdq/errors.hpp"

namespace kdq {

namespace {

std::string describe_arch(const char* kind, const Architecture& a) {
  std::ostringstream os;
  os << kind << " gru(" << a.num_gru_layers << "," << a.hidden_size << ")";
  return os.str();
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

Teacher make_teacher(const GruMlpModel& model, std::string description) {
  model.validate();
  auto shared = std::make_shared<const GruMlpModel>(model);
  Teacher t;
  t.num_classes = model.arch.num_classes;
  t.logits = [shared](const Window& w) { return forward<float>(w, *shared, ActivationMode::kExact); };
  t.description = description.empty() ? describe_arch("float", model.arch) : std::move(description);
  return t;
}

Teacher make_teacher(const QuantizedGruMlpModel& qmodel, std::string description) {
  qmodel.validate();
  auto shared = std::make_shared<const QuantizedGruMlpModel>(qmodel);
  Teacher t;
  t.num_classes = qmodel.arch.num_classes;
  t.logits = [shared](const Window& w) { return q_forward(w, *shared); };
  t.description = description.empty() ? describe_arch("q7", qmodel.arch) : std::move(description);
  return t;
}

SoftLabelSet generate_soft_labels(const Teacher& teacher, const Dataset& dataset,
                                  std::span<const std::int64_t> ids, std::size_t threads) {
  if (!teacher.logits) throw InvalidInput("generate_soft_labels: teacher has no logit function");
  if (teacher.num_classes != dataset.num_classes) {
    throw DataContractError("teacher predicts " + std::to_string(teacher.num_classes) + " classes, dataset has " +
                            std::to_string(dataset.num_classes));
  }
  std::vector<const Datapoint*> points;
  points.reserve(ids.size());
  for (std::int64_t id : ids) points.push_back(&dataset.by_id(id));

  std::vector<Vector<float>> out(points.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(1, points.size()));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < points.size();) out[i] = teacher.logits(points[i]->samples);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = points.size();
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  SoftLabelSet labels;
  labels.num_classes = teacher.num_classes;
  labels.provenance = teacher.description;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (out[i].size() != teacher.num_classes) {
      throw DataContractError("teacher returned " + std::to_string(out[i].size()) + " logits for id " +
                              std::to_string(points[i]->id));
    }
    labels.records[points[i]->id] = std::move(out[i]);
  }
  labels.validate();
  return labels;
}

SoftLabelSet generate_soft_labels(const GruMlpModel& teacher, const Dataset& dataset,
                                  std::span<const std::int64_t> ids, std::size_t threads) {
  return generate_soft_labels(make_teacher(teacher), dataset, ids, threads);
}

GruMlpModel distill(const TrainRequest& request, const EpochCallback& on_epoch) {
  if (request.soft_labels == nullptr) throw InvalidInput("distill: soft labels are required");
  GruMlpModel model = train(request, on_epoch);
  model.metadata["kd_alpha"] = format_double(request.kd.alpha);
  model.metadata["kd_temperature"] = format_double(request.kd.temperature);
  model.metadata["teacher"] = request.soft_labels->provenance.empty() ? "external" : request.soft_labels->provenance;
  return model;
}

SelfDistillResult self_distill(const TrainRequest& request, const EpochCallback& on_epoch) {
  TrainRequest plain = request;
  plain.soft_labels = nullptr;
  return self_distill_from(train(plain, on_epoch), request, on_epoch);
}

SelfDistillResult self_distill_from(GruMlpModel first_generation, const TrainRequest& request,
                                    const EpochCallback& on_epoch) {
  if (request.dataset == nullptr) throw InvalidInput("self_distill: dataset is required");
  SelfDistillResult r;
  r.first_generation = std::move(first_generation);
  r.soft_labels = generate_soft_labels(make_teacher(r.first_generation, "self " + describe_arch("float", r.first_generation.arch)),
                                       *request.dataset, request.train_ids);
  TrainRequest second = request;
  second.soft_labels = &r.soft_labels;
  r.student = distill(second, on_epoch);
  r.student.metadata["training"] = "self-kd";
  return r;
}

}  // namespace kdq

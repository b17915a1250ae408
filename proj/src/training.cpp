#include "kdq/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>
#include <sstream>

#include "kdq/metrics.hpp"

namespace kdq {

void KdConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidInput("alpha must lie in [0, 1]");
  if (!(temperature >= 1.0) || !std::isfinite(temperature)) throw InvalidInput("temperature must be >= 1");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw InvalidInput("learning rate must be positive");
  if (batch_size < 1) throw InvalidInput("batch size must be >= 1");
  if (!(clip_norm > 0)) throw InvalidInput("gradient clip norm must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw InvalidInput("momentum must lie in [0, 1)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd-momentum"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd" || name == "sgd-momentum") return OptimizerKind::kSgdMomentum;
  throw InvalidInput("unknown optimizer '" + name + "' (adam | sgd-momentum)");
}

namespace {

template <typename T>
struct LayerTape {
  Matrix<T> x, h_prev, r, z, n, hn;  // one row per timestep

  LayerTape(std::size_t steps, std::size_t in, std::size_t L)
      : x(steps, in), h_prev(steps, L), r(steps, L), z(steps, L), n(steps, L), hn(steps, L) {}
};

template <typename T>
void gate_forward(const GateParams<T>& g, std::span<const T> x, std::span<const T> h, std::span<T> input_part,
                  std::span<T> hidden_part) {
  std::copy(g.input_bias.begin(), g.input_bias.end(), input_part.begin());
  std::copy(g.hidden_bias.begin(), g.hidden_bias.end(), hidden_part.begin());
  matvec_add<T>(g.input_weights, x, input_part);
  matvec_add<T>(g.hidden_weights, h, hidden_part);
}

// Accumulates parameter gradients of one gate given d(pre-activation) and
// propagates into dx / dh_prev. `da_hidden` differs from `da_input` only for
// the candidate gate, where the hidden part is scaled by r.
template <typename T>
void gate_backward(const GateParams<T>& g, GateParams<T>& dg, std::span<const T> x, std::span<const T> h,
                   std::span<const T> da_input, std::span<const T> da_hidden, std::span<T> dx, std::span<T> dh) {
  for (std::size_t i = 0; i < da_input.size(); ++i) {
    dg.input_bias[i] += da_input[i];
    dg.hidden_bias[i] += da_hidden[i];
  }
  outer_add<T>(dg.input_weights, da_input, x);
  outer_add<T>(dg.hidden_weights, da_hidden, h);
  matvec_transposed_add<T>(g.input_weights, da_input, dx);
  matvec_transposed_add<T>(g.hidden_weights, da_hidden, dh);
}

template <typename T>
T example_backward(const TrainExample& ex, const BasicGruMlp<T>& model, const KdConfig& kd, Gradients<T>& grads,
                   T weight) {
  const Architecture& a = model.arch;
  const std::size_t N = a.sequence_length, L = a.hidden_size;
  const Window& w = *ex.window;
  if (w.rows != N || w.cols != a.input_dim) throw InvalidInput("backward: window shape does not match model");

  std::vector<LayerTape<T>> tapes;
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) tapes.emplace_back(N, a.layer_input(l), L);

  Vector<T> pre_r(L), pre_rh(L), pre_z(L), pre_zh(L), pre_n(L);
  std::vector<Vector<T>> state(a.num_gru_layers, Vector<T>(L, T(0)));
  for (std::size_t t = 0; t < N; ++t) {
    auto x0 = tapes[0].x.row(t);
    for (std::size_t k = 0; k < a.input_dim; ++k) {
      x0[k] = (T(w(t, k)) - model.norm_mean[k]) * model.norm_inv_std[k];
    }
    for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
      LayerTape<T>& tp = tapes[l];
      if (l > 0) std::copy(state[l - 1].begin(), state[l - 1].end(), tp.x.row(t).begin());
      std::span<const T> x = tp.x.row(t);
      std::copy(state[l].begin(), state[l].end(), tp.h_prev.row(t).begin());
      std::span<const T> hp = tp.h_prev.row(t);
      const GruLayerParams<T>& p = model.layers[l];
      gate_forward<T>(p.reset, x, hp, pre_r, pre_rh);
      gate_forward<T>(p.update, x, hp, pre_z, pre_zh);
      gate_forward<T>(p.candidate, x, hp, pre_n, tp.hn.row(t));
      auto r = tp.r.row(t), z = tp.z.row(t), n = tp.n.row(t), hn = tp.hn.row(t);
      for (std::size_t i = 0; i < L; ++i) {
        r[i] = sigmoid_exact(pre_r[i] + pre_rh[i]);
        z[i] = sigmoid_exact(pre_z[i] + pre_zh[i]);
        n[i] = tanh_exact(pre_n[i] + r[i] * hn[i]);
        state[l][i] = (T(1) - z[i]) * n[i] + z[i] * hp[i];
      }
    }
  }

  // MLP head
  const MlpParams<T>& m = model.mlp;
  const Vector<T>& top = state.back();
  Vector<T> u = m.hidden_bias;
  matvec_add<T>(m.hidden_weights, std::span<const T>(top), u);
  Vector<T> act(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) act[i] = u[i] > T(0) ? u[i] : T(0);
  Vector<T> logits = m.output_bias;
  matvec_add<T>(m.output_weights, std::span<const T>(act), logits);

  // loss and its gradient w.r.t. the logits
  const std::size_t C = a.num_classes;
  if (ex.label >= C) throw InvalidInput("backward: label out of range");
  const bool use_teacher = ex.teacher != nullptr && kd.alpha != 1.0;
  T loss;
  Vector<T> dlogits(C);
  const Vector<T> q = softmax_t<T>(logits, 1.0);
  if (!use_teacher) {
    loss = hard_loss<T>(logits, ex.label);
    for (std::size_t i = 0; i < C; ++i) dlogits[i] = q[i] - T(i == ex.label ? 1 : 0);
  } else {
    if (ex.teacher->size() != C) throw InvalidInput("backward: teacher logit count does not match classes");
    const Vector<T> v = cast_vector<T>(*ex.teacher);
    loss = kd_loss<T>(logits, ex.label, v, kd);
    const Vector<T> qt = softmax_t<T>(logits, kd.temperature);
    const Vector<T> pt = softmax_t<T>(v, kd.temperature);
    const T ah(kd.alpha), as((1.0 - kd.alpha) * kd.temperature);
    for (std::size_t i = 0; i < C; ++i) {
      dlogits[i] = ah * (q[i] - T(i == ex.label ? 1 : 0)) + as * (qt[i] - pt[i]);
    }
  }
  for (auto& d : dlogits) d = d * weight;

  MlpParams<T>& gm = grads.mlp;
  for (std::size_t i = 0; i < C; ++i) gm.output_bias[i] += dlogits[i];
  outer_add<T>(gm.output_weights, dlogits, act);
  Vector<T> du(u.size(), T(0));
  matvec_transposed_add<T>(m.output_weights, std::span<const T>(dlogits), du);
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] > T(0))) du[i] = T(0);
    gm.hidden_bias[i] += du[i];
  }
  outer_add<T>(gm.hidden_weights, du, top);

  // BPTT, top layer first; dx of layer l becomes the external dh of layer l-1
  Matrix<T> external(N, L);
  matvec_transposed_add<T>(m.hidden_weights, std::span<const T>(du), external.row(N - 1));
  Vector<T> dh(L), dh_prev(L), da_r(L), da_z(L), da_n(L), da_hn(L);
  for (std::size_t l = a.num_gru_layers; l-- > 0;) {
    const LayerTape<T>& tp = tapes[l];
    const GruLayerParams<T>& p = model.layers[l];
    GruLayerParams<T>& gp = grads.layers[l];
    Matrix<T> dx(N, a.layer_input(l));
    std::fill(dh.begin(), dh.end(), T(0));
    for (std::size_t t = N; t-- > 0;) {
      auto ext = external.row(t);
      auto r = tp.r.row(t), z = tp.z.row(t), n = tp.n.row(t), hn = tp.hn.row(t), hp = tp.h_prev.row(t);
      for (std::size_t i = 0; i < L; ++i) {
        const T g = dh[i] + ext[i];
        const T dn = g * (T(1) - z[i]);
        const T dz = g * (hp[i] - n[i]);
        dh_prev[i] = g * z[i];
        da_n[i] = dn * (T(1) - n[i] * n[i]);
        da_hn[i] = da_n[i] * r[i];
        const T dr = da_n[i] * hn[i];
        da_r[i] = dr * r[i] * (T(1) - r[i]);
        da_z[i] = dz * z[i] * (T(1) - z[i]);
      }
      std::span<const T> x = tp.x.row(t);
      gate_backward<T>(p.reset, gp.reset, x, hp, da_r, da_r, dx.row(t), dh_prev);
      gate_backward<T>(p.update, gp.update, x, hp, da_z, da_z, dx.row(t), dh_prev);
      gate_backward<T>(p.candidate, gp.candidate, x, hp, da_n, da_hn, dx.row(t), dh_prev);
      std::swap(dh, dh_prev);
    }
    if (l > 0) external = std::move(dx);
  }
  return loss;
}

}  // namespace

template <typename T>
T backward(std::span<const TrainExample> batch, const BasicGruMlp<T>& model, const KdConfig& kd,
           Gradients<T>& grads) {
  if (batch.empty()) throw InvalidInput("backward: empty batch");
  kd.validate();
  grads = Gradients<T>::zeros(model.arch);
  std::fill(grads.norm_inv_std.begin(), grads.norm_inv_std.end(), T(0));
  const T weight = T(1) / T(static_cast<double>(batch.size()));
  T total(0);
  for (const auto& ex : batch) total += example_backward<T>(ex, model, kd, grads, weight);
  return total * weight;
}

template float backward<float>(std::span<const TrainExample>, const BasicGruMlp<float>&, const KdConfig&,
                               Gradients<float>&);
template double backward<double>(std::span<const TrainExample>, const BasicGruMlp<double>&, const KdConfig&,
                                 Gradients<double>&);

GruMlpModel init_model(const Architecture& arch, std::uint64_t seed) {
  GruMlpModel m = GruMlpModel::zeros(arch);
  std::mt19937_64 rng(seed);
  const float bound = 1.0f / std::sqrt(static_cast<float>(arch.hidden_size));
  std::uniform_real_distribution<float> u(-bound, bound);
  m.for_each_param([&](const std::string& name, std::span<float> values) {
    if (name.ends_with("weights")) {
      for (auto& v : values) v = u(rng);
    }
  });
  return m;
}

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0f), v_(n, 0.0f) {}

  // flat gradient in for_each_param order
  void step(GruMlpModel& model, std::vector<float>& g) {
    double sq = 0;
    for (float x : g) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      const float f = static_cast<float>(cfg_.clip_norm / norm);
      for (auto& x : g) x *= f;
    }
    ++t_;
    const float lr = static_cast<float>(cfg_.learning_rate);
    std::size_t k = 0;
    if (cfg_.optimizer == OptimizerKind::kAdam) {
      constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
      const float c1 = 1.0f - static_cast<float>(std::pow(b1, t_));
      const float c2 = 1.0f - static_cast<float>(std::pow(b2, t_));
      model.for_each_param([&](const std::string&, std::span<float> p) {
        for (auto& w : p) {
          m_[k] = b1 * m_[k] + (1 - b1) * g[k];
          v_[k] = b2 * v_[k] + (1 - b2) * g[k] * g[k];
          w -= lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps);
          ++k;
        }
      });
    } else {
      const float mu = static_cast<float>(cfg_.momentum);
      model.for_each_param([&](const std::string&, std::span<float> p) {
        for (auto& w : p) {
          m_[k] = mu * m_[k] + g[k];
          w -= lr * m_[k];
          ++k;
        }
      });
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<float> m_, v_;
  double t_ = 0;
};

std::vector<float> flatten(const Gradients<float>& g) {
  std::vector<float> out;
  g.for_each_param([&](const std::string&, std::span<const float> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

}  // namespace

double evaluate_mcc(const GruMlpModel& model, const Dataset& dataset, std::span<const std::int64_t> ids) {
  std::vector<std::size_t> preds, labels;
  for (auto id : ids) {
    const Datapoint& dp = dataset.by_id(id);
    preds.push_back(predict(dp.samples, model));
    labels.push_back(dp.label);
  }
  return mcc_multiclass(confusion(preds, labels, dataset.num_classes));
}

GruMlpModel train(const TrainRequest& req, const EpochCallback& on_epoch) {
  if (req.dataset == nullptr) throw InvalidInput("train: no dataset");
  const Dataset& ds = *req.dataset;
  if (req.train_ids.empty()) throw InvalidInput("train: empty training split");
  req.config.validate();
  req.kd.validate();

  Architecture arch = req.arch;
  arch.sequence_length = ds.sequence_length;
  arch.input_dim = ds.input_dim;
  arch.num_classes = ds.num_classes;
  arch.validate();

  const bool use_kd = req.soft_labels != nullptr && req.kd.alpha < 1.0;
  std::vector<TrainExample> examples;
  examples.reserve(req.train_ids.size());
  for (auto id : req.train_ids) {
    const Datapoint& dp = ds.by_id(id);
    TrainExample ex{&dp.samples, dp.label, nullptr};
    if (use_kd) ex.teacher = req.soft_labels->find(id);
    examples.push_back(ex);
  }
  if (use_kd) {
    const auto missing = req.soft_labels->missing(req.train_ids);
    if (!missing.empty()) {
      std::ostringstream msg;
      msg << "soft labels missing for " << missing.size() << " training datapoint(s):";
      for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 20); ++i) msg << ' ' << missing[i];
      if (missing.size() > 20) msg << " ...";
      throw DataContractError(msg.str());
    }
    if (req.soft_labels->num_classes != ds.num_classes) {
      throw DataContractError("soft labels have " + std::to_string(req.soft_labels->num_classes) +
                              " classes, dataset has " + std::to_string(ds.num_classes));
    }
  }

  GruMlpModel model = init_model(arch, req.config.seed);
  const NormStats stats = compute_norm_stats(ds, req.train_ids);
  model.norm_mean = stats.mean;
  model.norm_inv_std = stats.inv_std;

  std::mt19937_64 shuffle_rng(req.config.seed ^ 0x9e3779b97f4a7c15ULL);

  std::size_t num_params = 0;
  model.for_each_param([&](const std::string&, std::span<const float> s) { num_params += s.size(); });
  Optimizer opt(req.config, num_params);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainExample> batch;
  Gradients<float> grads;

  for (std::size_t epoch = 1; epoch <= req.config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += req.config.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + req.config.batch_size); ++i) {
        batch.push_back(examples[order[i]]);
      }
      const float loss = backward<float>(batch, model, req.kd, grads);
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                            std::to_string(b) + " (lr " + std::to_string(req.config.learning_rate) + ")");
      }
      loss_sum += static_cast<double>(loss) * static_cast<double>(batch.size());
      std::vector<float> flat = flatten(grads);
      opt.step(model, flat);
    }
    if (on_epoch) {
      EpochLog log;
      log.epoch = epoch;
      log.mean_loss = loss_sum / static_cast<double>(examples.size());
      if (!req.validation_ids.empty()) log.val_mcc = evaluate_mcc(model, ds, req.validation_ids);
      log.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      on_epoch(log);
    }
  }
  model.metadata["seed"] = std::to_string(req.config.seed);
  model.metadata["epochs"] = std::to_string(req.config.epochs);
  model.metadata["training"] = use_kd ? "kd" : "plain";
  return model;
}

}  // namespace kdq

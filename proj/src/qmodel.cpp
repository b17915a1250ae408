#include "kdq/qmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "kdq/metrics.hpp"
#include "kdq/op_count.hpp"

namespace kdq {

static_assert(std::endian::native == std::endian::little, "rodata images assume a little-endian host");

void InputScales::validate() const {
  for (float s : {s_a, s_h, s_m}) {
    if (!is_power_of_two(s)) throw InvalidInput("input scales must be positive powers of two, got " + std::to_string(s));
  }
}

namespace {

QGate quantize_gate(const GateParams<float>& g, float s_in, float s_h) {
  QGate q;
  q.input_weights = quantize_matrix(g.input_weights);
  q.hidden_weights = quantize_matrix(g.hidden_weights);
  q.input_bias = g.input_bias;
  q.hidden_bias = g.hidden_bias;
  q.input_rescale = rescale_factor(s_in, q.input_weights.scale());
  q.hidden_rescale = rescale_factor(s_h, q.hidden_weights.scale());
  return q;
}

void set_rescales(QuantizedGruMlpModel& qm) {
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    for (QGate* g : {&qm.layers[l].reset, &qm.layers[l].update, &qm.layers[l].candidate}) {
      g->input_rescale = rescale_factor(qm.layer_input_scale(l), g->input_weights.scale());
      g->hidden_rescale = rescale_factor(qm.scales.s_h, g->hidden_weights.scale());
    }
  }
  qm.mlp.hidden_rescale = rescale_factor(qm.scales.s_h, qm.mlp.hidden_weights.scale());
  qm.mlp.output_rescale = rescale_factor(qm.scales.s_m, qm.mlp.output_weights.scale());
}

}  // namespace

void QuantizedGruMlpModel::validate() const {
  arch.validate();
  scales.validate();
  auto fail = [](const std::string& what) { throw InvalidInput("quantized model: " + what); };
  if (norm_mean.size() != arch.input_dim || norm_inv_std.size() != arch.input_dim) fail("bad normalization length");
  if (layers.size() != arch.num_gru_layers) fail("layer count does not match architecture");
  const std::size_t L = arch.hidden_size;
  auto shape = [&](const Q7Matrix& m, std::size_t r, std::size_t c) {
    if (m.rows() != r || m.cols() != c) fail("bad weight shape");
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const QGate* g : {&layers[l].reset, &layers[l].update, &layers[l].candidate}) {
      shape(g->input_weights, L, arch.layer_input(l));
      shape(g->hidden_weights, L, L);
      if (g->input_bias.size() != L || g->hidden_bias.size() != L) fail("bad gate bias length");
      if (g->input_rescale != rescale_factor(layer_input_scale(l), g->input_weights.scale()) ||
          g->hidden_rescale != rescale_factor(scales.s_h, g->hidden_weights.scale())) {
        fail("stored rescale does not match 2^7 * s_in * s_W");
      }
    }
  }
  shape(mlp.hidden_weights, arch.mlp_hidden(), L);
  shape(mlp.output_weights, arch.num_classes, arch.mlp_hidden());
  if (mlp.hidden_bias.size() != arch.mlp_hidden() || mlp.output_bias.size() != arch.num_classes) {
    fail("bad mlp bias length");
  }
  if (mlp.hidden_rescale != rescale_factor(scales.s_h, mlp.hidden_weights.scale()) ||
      mlp.output_rescale != rescale_factor(scales.s_m, mlp.output_weights.scale())) {
    fail("stored mlp rescale does not match 2^7 * s_in * s_W");
  }
}

QuantizedGruMlpModel quantize_model(const GruMlpModel& model, const InputScales& scales) {
  model.validate();
  scales.validate();
  QuantizedGruMlpModel qm;
  qm.arch = model.arch;
  qm.norm_mean = model.norm_mean;
  qm.norm_inv_std = model.norm_inv_std;
  qm.scales = scales;
  qm.metadata = model.metadata;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const float s_in = l == 0 ? scales.s_a : scales.s_h;
    const auto& p = model.layers[l];
    qm.layers.push_back({quantize_gate(p.reset, s_in, scales.s_h), quantize_gate(p.update, s_in, scales.s_h),
                         quantize_gate(p.candidate, s_in, scales.s_h)});
  }
  qm.mlp.hidden_weights = quantize_matrix(model.mlp.hidden_weights);
  qm.mlp.hidden_bias = model.mlp.hidden_bias;
  qm.mlp.output_weights = quantize_matrix(model.mlp.output_weights);
  qm.mlp.output_bias = model.mlp.output_bias;
  set_rescales(qm);
  return qm;
}

QuantizedGruMlpModel with_scales(QuantizedGruMlpModel qmodel, const InputScales& scales) {
  scales.validate();
  qmodel.scales = scales;
  set_rescales(qmodel);
  return qmodel;
}

GruMlpModel dequantize(const QuantizedGruMlpModel& qm) {
  GruMlpModel m = GruMlpModel::zeros(qm.arch);
  m.norm_mean = qm.norm_mean;
  m.norm_inv_std = qm.norm_inv_std;
  m.metadata = qm.metadata;
  auto gate = [](const QGate& g) {
    return GateParams<float>{g.input_weights.dequantize(), g.hidden_weights.dequantize(), g.input_bias,
                             g.hidden_bias};
  };
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    m.layers[l] = {gate(qm.layers[l].reset), gate(qm.layers[l].update), gate(qm.layers[l].candidate)};
  }
  m.mlp = {qm.mlp.hidden_weights.dequantize(), qm.mlp.hidden_bias, qm.mlp.output_weights.dequantize(),
           qm.mlp.output_bias};
  return m;
}

namespace {

// Quantized dataflow, templated on the float type so the same code runs
// plain (float) and instrumented (Counted<float>).
template <typename F>
class QRunner {
 public:
  QRunner(const QuantizedGruMlpModel& qm, ActivationMode mode, QOpCounts* counts)
      : qm_(qm), mode_(mode), counts_(counts) {}

  // to_q7 with the multiply expressed in F
  Q7Vector quantize(std::span<const F> x, float scale) const {
    const F gain(kQ7One / scale);
    Q7Vector q(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float v = static_cast<float>(x[i] * gain);
      if (!std::isfinite(v)) throw InvalidInput("q_forward: non-finite activation");
      q[i] = round_to_q7(static_cast<double>(v));
    }
    return q;
  }

  // rescale(W q) + bias, written into out
  void mvm(const Q7Matrix& w, const Q7Vector& xq, float rescale, const Vector<float>& bias, std::span<F> out) const {
    Q7Vector y;
    if (counts_ != nullptr) {
      TallyScope scope;
      y = q7_matvec_counted(w, xq);
      counts_->kernel_float_mults += scope.delta().float_mults;
      counts_->kernel_int_mults += scope.delta().int_mults;
    } else {
      y = q7_matvec(w, xq);
    }
    const F r(rescale);
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = (F(static_cast<float>(y[i])) / F(kQ7One)) * r + F(bias[i]);
  }

  // Final hidden state of the top GRU layer.
  Vector<F> gru_stack(const Window& window, QForwardTrace* trace) const {
    const Architecture& a = qm_.arch;
    if (window.rows != a.sequence_length || window.cols != a.input_dim) {
      throw InvalidInput("q_forward: window is " + std::to_string(window.rows) + "x" + std::to_string(window.cols) +
                         ", model expects " + std::to_string(a.sequence_length) + "x" + std::to_string(a.input_dim));
    }
    const std::size_t L = a.hidden_size;
    if (trace) trace->hidden.assign(a.num_gru_layers, {});
    std::vector<Vector<F>> state(a.num_gru_layers, Vector<F>(L, F(0)));
    Vector<F> x(a.input_dim), xr(L), hr(L), xz(L), hz(L), xn(L), hn(L);
    for (std::size_t t = 0; t < a.sequence_length; ++t) {
      x.resize(a.input_dim);
      for (std::size_t k = 0; k < a.input_dim; ++k) {
        x[k] = (F(window(t, k)) - F(qm_.norm_mean[k])) * F(qm_.norm_inv_std[k]);
      }
      for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
        const QGruLayer& p = qm_.layers[l];
        const Q7Vector xq = quantize(x, qm_.layer_input_scale(l));
        const Q7Vector hq = quantize(state[l], qm_.scales.s_h);
        mvm(p.reset.input_weights, xq, p.reset.input_rescale, p.reset.input_bias, xr);
        mvm(p.reset.hidden_weights, hq, p.reset.hidden_rescale, p.reset.hidden_bias, hr);
        mvm(p.update.input_weights, xq, p.update.input_rescale, p.update.input_bias, xz);
        mvm(p.update.hidden_weights, hq, p.update.hidden_rescale, p.update.hidden_bias, hz);
        mvm(p.candidate.input_weights, xq, p.candidate.input_rescale, p.candidate.input_bias, xn);
        mvm(p.candidate.hidden_weights, hq, p.candidate.hidden_rescale, p.candidate.hidden_bias, hn);
        Vector<F>& h = state[l];
        for (std::size_t i = 0; i < L; ++i) {
          const F r = activate_sigmoid(xr[i] + hr[i], mode_);
          const F z = activate_sigmoid(xz[i] + hz[i], mode_);
          const F n = activate_tanh(xn[i] + r * hn[i], mode_);
          h[i] = (F(1) - z) * n + z * h[i];
        }
        if (trace) {
          Vector<float> hf(L);
          for (std::size_t i = 0; i < L; ++i) hf[i] = static_cast<float>(h[i]);
          trace->hidden[l].push_back(std::move(hf));
        }
        x = h;
      }
    }
    return std::move(state.back());
  }

  Vector<F> head(const Vector<F>& h) const {
    const QMlp& m = qm_.mlp;
    Vector<F> u(qm_.arch.mlp_hidden());
    mvm(m.hidden_weights, quantize(h, qm_.scales.s_h), m.hidden_rescale, m.hidden_bias, u);
    for (auto& v : u) {
      if (v < F(0)) v = F(0);
    }
    Vector<F> logits(qm_.arch.num_classes);
    mvm(m.output_weights, quantize(u, qm_.scales.s_m), m.output_rescale, m.output_bias, logits);
    return logits;
  }

  Vector<F> run(const Window& window, QForwardTrace* trace) const { return head(gru_stack(window, trace)); }

 private:
  const QuantizedGruMlpModel& qm_;
  ActivationMode mode_;
  QOpCounts* counts_;
};

}  // namespace

Vector<float> q_forward(const Window& window, const QuantizedGruMlpModel& qmodel, ActivationMode mode) {
  return QRunner<float>(qmodel, mode, nullptr).run(window, nullptr);
}

QForwardTrace q_forward_trace(const Window& window, const QuantizedGruMlpModel& qmodel, ActivationMode mode) {
  QForwardTrace trace;
  trace.logits = QRunner<float>(qmodel, mode, nullptr).run(window, &trace);
  return trace;
}

std::size_t q_predict(const Window& window, const QuantizedGruMlpModel& qmodel, ActivationMode mode) {
  const Vector<float> logits = q_forward(window, qmodel, mode);
  return argmax<float>(logits);
}

QOpCounts q_forward_ops(const Window& window, const QuantizedGruMlpModel& qmodel, ActivationMode mode) {
  QOpCounts counts;
  TallyScope total;
  const auto logits = QRunner<Counted<float>>(qmodel, mode, &counts).run(window, nullptr);
  for (const auto& v : logits) counts.logits.push_back(v.value());
  counts.float_mults = total.delta().float_mults;
  counts.int_mults = total.delta().int_mults;
  return counts;
}

double input_saturation_rate(const GruMlpModel& model, const Dataset& dataset, std::span<const std::int64_t> ids,
                             float s_a) {
  std::uint64_t clipped = 0, total = 0;
  const float gain = kQ7One / s_a;
  for (auto id : ids) {
    const Window& w = dataset.by_id(id).samples;
    for (std::size_t t = 0; t < w.rows; ++t) {
      const Vector<float> x = normalize<float>(w.row(t), model);
      for (float v : x) {
        const double q = std::round(static_cast<double>(v * gain));
        clipped += (q > 127.0 || q < -128.0);
        ++total;
      }
    }
  }
  return total ? static_cast<double>(clipped) / static_cast<double>(total) : 0.0;
}

TuneResult tune_input_scales(const GruMlpModel& model, const Dataset& dataset,
                             std::span<const std::int64_t> calibration_ids) {
  if (calibration_ids.empty()) throw InvalidInput("tune_input_scales: empty calibration set");
  std::vector<float> grid;
  for (int e = kScaleGridMinLog2; e <= kScaleGridMaxLog2; ++e) grid.push_back(std::ldexp(1.0f, e));

  std::vector<const Datapoint*> points;
  std::vector<std::size_t> labels;
  for (auto id : calibration_ids) {
    points.push_back(&dataset.by_id(id));
    labels.push_back(points.back()->label);
  }
  const bool single_class = std::all_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == labels[0]; });
  std::vector<Vector<float>> reference;
  if (single_class) {
    for (const auto* dp : points) reference.push_back(forward<float>(dp->samples, model));
  }

  const QuantizedGruMlpModel base = quantize_model(model);
  const std::size_t C = model.arch.num_classes;
  TuneResult best;
  best.objective = -std::numeric_limits<double>::infinity();
  best.mse_fallback = single_class;

  // The GRU stack depends on (s_a, s_h) only, so its final states are computed
  // once per pair and reused for every s_m.
  for (float s_a : grid) {
    for (float s_h : grid) {
      const QuantizedGruMlpModel gru_only = with_scales(base, {s_a, s_h, 1.0f});
      std::vector<Vector<float>> finals;
      finals.reserve(points.size());
      for (const auto* dp : points) {
        finals.push_back(QRunner<float>(gru_only, ActivationMode::kApprox, nullptr).gru_stack(dp->samples, nullptr));
      }
      for (float s_m : grid) {
        const QuantizedGruMlpModel qm = with_scales(base, {s_a, s_h, s_m});
        const QRunner<float> runner(qm, ActivationMode::kApprox, nullptr);
        std::vector<std::size_t> preds;
        double sq = 0;
        for (std::size_t k = 0; k < points.size(); ++k) {
          const Vector<float> logits = runner.head(finals[k]);
          if (single_class) {
            for (std::size_t i = 0; i < C; ++i) {
              const double d = static_cast<double>(logits[i]) - reference[k][i];
              sq += d * d;
            }
          } else {
            preds.push_back(argmax<float>(logits));
          }
        }
        const double objective =
            single_class ? -sq / static_cast<double>(points.size() * C) : mcc_multiclass(confusion(preds, labels, C));
        ++best.evaluated;
        if (objective > best.objective) {
          best.objective = objective;
          best.scales = {s_a, s_h, s_m};
        }
      }
    }
  }
  best.input_saturation = input_saturation_rate(model, dataset, calibration_ids, best.scales.s_a);
  return best;
}

// ---------------------------------------------------------------------------
// rodata images

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u16(std::size_t v) {
    if (v > 0xffff) throw InvalidInput("rodata: dimension " + std::to_string(v) + " does not fit 16 bits");
    const std::uint16_t x = static_cast<std::uint16_t>(v);
    bytes(&x, 2);
  }
  void f32(float v) { bytes(&v, 4); }
  void f32s(const std::vector<float>& v) { bytes(v.data(), v.size() * 4); }
  void q7(const Q7Matrix& m) {
    f32(m.scale());
    bytes(m.data().data(), m.data().size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > in_.size()) throw DataContractError("rodata: image truncated");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint16_t u16() {
    std::uint16_t v;
    bytes(&v, 2);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> v(n);
    bytes(v.data(), n * 4);
    return v;
  }
  Q7Matrix q7(std::size_t rows, std::size_t cols) {
    const float scale = f32();
    std::vector<std::int8_t> d(rows * cols);
    bytes(d.data(), d.size());
    try {
      return Q7Matrix(rows, cols, std::move(d), scale);
    } catch (const InvalidInput& e) {
      throw DataContractError(std::string("rodata: ") + e.what());
    }
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_header(Writer& w, const char* magic, const Architecture& a) {
  w.bytes(magic, 4);
  w.u16(kRodataVersion);
  w.u16(a.num_gru_layers);
  w.u16(a.hidden_size);
  w.u16(a.num_classes);
  w.u16(a.sequence_length);
  w.u16(a.input_dim);
}

Architecture read_header(Reader& r, const char* magic) {
  char m[4];
  r.bytes(m, 4);
  if (std::memcmp(m, magic, 4) != 0) throw DataContractError(std::string("rodata: expected magic ") + magic);
  const auto version = r.u16();
  if (version != kRodataVersion) throw DataContractError("rodata: unsupported version " + std::to_string(version));
  Architecture a;
  a.num_gru_layers = r.u16();
  a.hidden_size = r.u16();
  a.num_classes = r.u16();
  a.sequence_length = r.u16();
  a.input_dim = r.u16();
  try {
    a.validate();
  } catch (const InvalidInput& e) {
    throw DataContractError(std::string("rodata: ") + e.what());
  }
  return a;
}

}  // namespace

std::vector<std::uint8_t> export_rodata(const QuantizedGruMlpModel& qm) {
  qm.validate();
  Writer w;
  write_header(w, "KDQ7", qm.arch);
  w.f32(qm.scales.s_a);
  w.f32(qm.scales.s_h);
  w.f32(qm.scales.s_m);
  w.f32s(qm.norm_mean);
  w.f32s(qm.norm_inv_std);
  for (const auto& layer : qm.layers) {
    for (const QGate* g : {&layer.reset, &layer.update, &layer.candidate}) {
      w.q7(g->input_weights);
      w.q7(g->hidden_weights);
      w.f32s(g->input_bias);
      w.f32s(g->hidden_bias);
    }
  }
  w.q7(qm.mlp.hidden_weights);
  w.f32s(qm.mlp.hidden_bias);
  w.q7(qm.mlp.output_weights);
  w.f32s(qm.mlp.output_bias);
  return std::move(w.out);
}

QuantizedGruMlpModel import_rodata(std::span<const std::uint8_t> image) {
  Reader r(image);
  QuantizedGruMlpModel qm;
  qm.arch = read_header(r, "KDQ7");
  const Architecture& a = qm.arch;
  if (image.size() != rodata_size_q7(a)) throw DataContractError("rodata: image size does not match its header");
  qm.scales.s_a = r.f32();
  qm.scales.s_h = r.f32();
  qm.scales.s_m = r.f32();
  qm.norm_mean = r.f32s(a.input_dim);
  qm.norm_inv_std = r.f32s(a.input_dim);
  const std::size_t L = a.hidden_size;
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
    QGruLayer layer;
    for (QGate* g : {&layer.reset, &layer.update, &layer.candidate}) {
      g->input_weights = r.q7(L, a.layer_input(l));
      g->hidden_weights = r.q7(L, L);
      g->input_bias = r.f32s(L);
      g->hidden_bias = r.f32s(L);
    }
    qm.layers.push_back(std::move(layer));
  }
  qm.mlp.hidden_weights = r.q7(a.mlp_hidden(), L);
  qm.mlp.hidden_bias = r.f32s(a.mlp_hidden());
  qm.mlp.output_weights = r.q7(a.num_classes, a.mlp_hidden());
  qm.mlp.output_bias = r.f32s(a.num_classes);
  if (!r.done()) throw DataContractError("rodata: trailing bytes after the last tensor");
  if (!is_power_of_two(qm.scales.s_a) || !is_power_of_two(qm.scales.s_h) ||
      !is_power_of_two(qm.scales.s_m)) {
    throw DataContractError("rodata: input scales are not powers of two");
  }
  set_rescales(qm);
  return qm;
}

std::vector<std::uint8_t> export_rodata_fp32(const GruMlpModel& model) {
  model.validate();
  Writer w;
  write_header(w, "KDFP", model.arch);
  w.f32s(model.norm_mean);
  w.f32s(model.norm_inv_std);
  model.for_each_param([&](const std::string&, std::span<const float> s) { w.bytes(s.data(), s.size() * 4); });
  return std::move(w.out);
}

GruMlpModel import_rodata_fp32(std::span<const std::uint8_t> image) {
  Reader r(image);
  const Architecture a = read_header(r, "KDFP");
  if (image.size() != rodata_size_fp32(a)) throw DataContractError("rodata: image size does not match its header");
  GruMlpModel m = GruMlpModel::zeros(a);
  m.norm_mean = r.f32s(a.input_dim);
  m.norm_inv_std = r.f32s(a.input_dim);
  m.for_each_param([&](const std::string&, std::span<float> s) { r.bytes(s.data(), s.size() * 4); });
  if (!r.done()) throw DataContractError("rodata: trailing bytes after the last tensor");
  return m;
}

std::size_t rodata_size_q7(const Architecture& a) {
  const std::size_t L = a.hidden_size, H = a.mlp_hidden();
  std::size_t n = 16 + 3 * 4 + 2 * 4 * a.input_dim;
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) n += 3 * (4 + L * a.layer_input(l) + 4 + L * L + 2 * 4 * L);
  n += 4 + H * L + 4 * H + 4 + a.num_classes * H + 4 * a.num_classes;
  return n;
}

std::size_t rodata_size_fp32(const Architecture& a) { return 16 + 4 * count_params(a); }

}  // namespace kdq

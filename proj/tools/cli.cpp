#include "cli.hpp"

#include <openssl/evp.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdq/data.hpp"
#include "kdq/distillation.hpp"
#include "kdq/errors.hpp"
#include "kdq/experiment.hpp"
#include "kdq/json_util.hpp"
#include "kdq/metrics.hpp"
#include "kdq/qmodel.hpp"
#include "kdq/serialize.hpp"
#include "kdq/soft_labels.hpp"
#include "kdq/training.hpp"

#ifndef KDQ_VERSION
#define KDQ_VERSION "0.0.0"
#endif

namespace kdq::cli {

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Flat JSON object of option defaults, e.g. {"epochs": 10, "arch": "gru(1,8)"},
// applied to whichever subcommand was selected.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App& root) : root_(root) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    throw CLI::FileError("writing config files is not supported");
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::FileError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::FileError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    const auto selected = root_.get_subcommands();
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      if (!selected.empty()) item.parents = {selected.front()->get_name()};
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(key, v));
      } else {
        item.inputs.push_back(scalar(key, value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::FileError("config key '" + key + "' must be a string, number, boolean or array of those");
  }

  const CLI::App& root_;
};

struct Options {
  bool json = false;
  bool verbose = false;
  std::string manifest;

  // gen-data
  std::size_t animals = 8;
  std::size_t windows = 50;
  std::size_t seq_len = 64;
  std::uint64_t data_seed = 7;

  // shared paths
  std::string data;
  std::string model;
  std::string out;
  std::string log;
  std::string soft_labels;
  std::string report;
  std::string rodata;
  std::string holdout;

  // training
  std::string arch = "gru(1,32)";
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  std::string optimizer = "adam";
  double momentum = 0.9;
  double clip = 5.0;
  double alpha = 0.1;
  double temperature = 3.0;
  std::string encoding = "base64";

  // quantize
  float sa = 1.0f;
  float sh = 1.0f;
  float sm = 1.0f;
  bool tune = false;
  std::size_t calibration_limit = 0;

  // evaluate
  std::string cv;
  std::string animal;
  std::string student_arch = "gru(1,8)";
  std::string teacher_arch = "gru(1,32)";
  std::vector<std::string> variants{"no_kd", "kd", "self_kd"};
  bool no_quantize = false;
  std::size_t threads = 1;

  // infer / bench
  std::string window_json;
  std::size_t repeats = 20;

  // rerun
  std::string rerun_manifest;
  std::string out_dir;
};

enum class Role { kInput, kOutput, kLog };

struct Context {
  Options& o;
  std::ostream& out;
  std::ostream& err;
  // Part of the result that must be reproducible; defaults to the whole result.
  std::optional<json> deterministic;
};

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, Role>> paths;  // option long name, role
  std::function<json(Context&)> run;
};

// ---------------------------------------------------------------------------
// helpers

void write_binary_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataContractError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataContractError("failed writing " + path.string());
}

struct Split {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> holdout;
};

Split split_by_animal(const Dataset& ds, const std::string& animal) {
  Split s;
  for (const auto& dp : ds.datapoints) (animal.empty() || dp.animal_id != animal ? s.train : s.holdout).push_back(dp.id);
  if (!animal.empty() && s.holdout.empty()) throw InvalidInput("no datapoints for animal '" + animal + "'");
  if (s.train.empty()) throw InvalidInput("the training split is empty");
  return s;
}

void check_compatible(const Architecture& a, const Dataset& ds) {
  if (a.sequence_length != ds.sequence_length || a.input_dim != ds.input_dim || a.num_classes != ds.num_classes) {
    throw DataContractError("model expects windows of " + std::to_string(a.sequence_length) + "x" +
                            std::to_string(a.input_dim) + " and " + std::to_string(a.num_classes) +
                            " classes; dataset has " + std::to_string(ds.sequence_length) + "x" +
                            std::to_string(ds.input_dim) + " and " + std::to_string(ds.num_classes));
  }
}

const Architecture& arch_of(const AnyModel& m) {
  return std::visit([](const auto& x) -> const Architecture& { return x.arch; }, m);
}

const std::map<std::string, std::string>& metadata_of(const AnyModel& m) {
  return std::visit([](const auto& x) -> const std::map<std::string, std::string>& { return x.metadata; }, m);
}

const char* kind_of(const AnyModel& m) { return std::holds_alternative<GruMlpModel>(m) ? "float" : "quantized"; }

Vector<float> logits_of(const AnyModel& m, const Window& w) {
  if (const auto* f = std::get_if<GruMlpModel>(&m)) return forward(w, *f);
  return q_forward(w, std::get<QuantizedGruMlpModel>(m));
}

std::vector<std::string> class_names_of(const AnyModel& m) {
  const std::size_t c = arch_of(m).num_classes;
  const auto& md = metadata_of(m);
  if (auto it = md.find("class_names"); it != md.end()) {
    std::vector<std::string> names;
    std::stringstream ss(it->second);
    for (std::string part; std::getline(ss, part, ',');) names.push_back(part);
    if (names.size() == c) return names;
  }
  const Dataset defaults;
  if (c == defaults.num_classes) return defaults.class_names;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < c; ++k) names.push_back("class_" + std::to_string(k));
  return names;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

FloatEncoding parse_encoding(const std::string& s) {
  if (s == "base64") return FloatEncoding::kBase64;
  if (s == "decimal") return FloatEncoding::kDecimal;
  throw InvalidInput("unknown encoding '" + s + "'");
}

json scales_json(const InputScales& s) { return {{"s_a", s.s_a}, {"s_h", s.s_h}, {"s_m", s.s_m}}; }

void say(Context& c, const std::string& line) {
  if (!c.o.json) c.out << line << "\n";
}

// ---------------------------------------------------------------------------
// commands

json cmd_gen_data(Context& c) {
  const Options& o = c.o;
  const Dataset ds = synth_gen({o.animals, o.windows, o.seq_len, o.data_seed});
  save_dataset(ds, o.out);
  say(c, "wrote " + std::to_string(ds.datapoints.size()) + " windows to " + o.out);
  return {{"datapoints", ds.datapoints.size()}, {"animals", o.animals}, {"sequence_length", o.seq_len}};
}

json train_or_distill(Context& c, bool kd) {
  const Options& o = c.o;
  const Dataset ds = load_dataset(o.data);
  const Split split = split_by_animal(ds, o.holdout);

  TrainRequest req;
  req.dataset = &ds;
  req.train_ids = split.train;
  req.validation_ids = split.holdout;
  req.arch = parse_architecture(o.arch);
  req.config.epochs = o.epochs;
  req.config.learning_rate = o.lr;
  req.config.batch_size = o.batch;
  req.config.seed = o.seed;
  req.config.optimizer = parse_optimizer(o.optimizer);
  req.config.momentum = o.momentum;
  req.config.clip_norm = o.clip;
  req.kd = {o.alpha, o.temperature};
  const FloatEncoding encoding = parse_encoding(o.encoding);

  SoftLabelSet soft;
  if (kd) {
    soft = load_soft_labels(o.soft_labels);
    if (soft.provenance.empty()) soft.provenance = fs::path(o.soft_labels).filename().string();
    req.soft_labels = &soft;
  }

  std::vector<EpochLog> logs;
  auto on_epoch = [&](const EpochLog& e) {
    logs.push_back(e);
    if (c.o.verbose) {
      c.err << "epoch " << e.epoch << " loss " << e.mean_loss;
      if (e.val_mcc) c.err << " val_mcc " << *e.val_mcc;
      c.err << "\n";
    }
  };
  GruMlpModel model = kd ? distill(req, on_epoch) : train(req, on_epoch);
  model.metadata["arch"] = o.arch;
  model.metadata["class_names"] = join(ds.class_names, ",");
  save_model(model, o.out, encoding);

  if (!o.log.empty()) {
    std::string text;
    for (const auto& e : logs) {
      json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"wall_ms", e.wall_ms}};
      if (e.val_mcc) j["val_mcc"] = *e.val_mcc;
      text += j.dump() + "\n";
    }
    write_text_file(o.log, text);
  }

  json r;
  r["arch"] = o.arch;
  r["epochs"] = o.epochs;
  r["final_loss"] = logs.empty() ? json(nullptr) : json(logs.back().mean_loss);
  r["train_mcc"] = evaluate_mcc(model, ds, split.train);
  if (!split.holdout.empty()) r["validation_mcc"] = evaluate_mcc(model, ds, split.holdout);
  if (kd) r["teacher"] = soft.provenance;
  say(c, "wrote " + o.out + " (train MCC " + std::to_string(r["train_mcc"].get<double>()) + ")");
  return r;
}

json cmd_teacher_logits(Context& c) {
  const Options& o = c.o;
  const AnyModel m = load_any_model(o.model);
  const Dataset ds = load_dataset(o.data);
  check_compatible(arch_of(m), ds);
  const Split split = split_by_animal(ds, o.holdout);
  const std::string desc = std::string(kind_of(m)) + " " + fs::path(o.model).filename().string();
  const Teacher t = std::visit([&](const auto& x) { return make_teacher(x, desc); }, m);
  const SoftLabelSet labels = generate_soft_labels(t, ds, split.train);
  save_soft_labels(labels, o.out);
  say(c, "wrote " + std::to_string(labels.records.size()) + " rows to " + o.out);
  return {{"rows", labels.records.size()}, {"teacher", labels.provenance}};
}

json cmd_quantize(Context& c) {
  const Options& o = c.o;
  const GruMlpModel m = load_model(o.model);
  json r;
  InputScales scales{o.sa, o.sh, o.sm};
  if (o.tune) {
    if (o.data.empty()) throw InvalidInput("--tune needs --data");
    const Dataset ds = load_dataset(o.data);
    check_compatible(m.arch, ds);
    const Split split = split_by_animal(ds, o.holdout);
    const auto calib = calibration_subset(split.train, o.calibration_limit);
    const TuneResult t = tune_input_scales(m, ds, calib);
    scales = t.scales;
    r["objective"] = t.objective;
    r["objective_kind"] = t.mse_fallback ? "negative_logit_mse" : "mcc";
    r["input_saturation"] = t.input_saturation;
    r["grid_points"] = t.evaluated;
    r["calibration_windows"] = calib.size();
  }
  scales.validate();
  const QuantizedGruMlpModel qm = quantize_model(m, scales);
  save_qmodel(qm, o.out);
  r["tuned"] = o.tune;
  r["scales"] = scales_json(scales);
  r["rodata_bytes"] = rodata_size_q7(qm.arch);
  r["fp32_rodata_bytes"] = rodata_size_fp32(qm.arch);
  if (!o.rodata.empty()) write_binary_file(o.rodata, export_rodata(qm));
  std::ostringstream line;
  line << "wrote " << o.out << " (s_a " << scales.s_a << ", s_h " << scales.s_h << ", s_m " << scales.s_m << ")";
  say(c, line.str());
  return r;
}

json cmd_evaluate(Context& c) {
  const Options& o = c.o;
  const Dataset ds = load_dataset(o.data);
  json report;
  if (!o.cv.empty()) {
    if (o.cv != "loao") throw InvalidInput("unknown --cv scheme '" + o.cv + "' (expected loao)");
    CvConfig cfg;
    cfg.student = parse_architecture(o.student_arch);
    cfg.teacher = parse_architecture(o.teacher_arch);
    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.learning_rate = o.lr;
    tc.batch_size = o.batch;
    tc.seed = o.seed;
    tc.optimizer = parse_optimizer(o.optimizer);
    tc.momentum = o.momentum;
    tc.clip_norm = o.clip;
    cfg.teacher_train = cfg.student_train = tc;
    cfg.kd = {o.alpha, o.temperature};
    auto has = [&](const char* v) { return std::find(o.variants.begin(), o.variants.end(), v) != o.variants.end(); };
    for (const auto& v : o.variants) {
      if (v != "teacher" && v != "no_kd" && v != "kd" && v != "self_kd") throw InvalidInput("unknown variant '" + v + "'");
    }
    cfg.run_kd = has("kd");
    cfg.run_self_kd = has("self_kd");
    cfg.run_teacher = cfg.run_kd || has("teacher");
    cfg.quantize = !o.no_quantize;
    cfg.calibration_limit = o.calibration_limit;
    cfg.threads = o.threads;
    const CvResult r = run_loao_cv(ds, cfg, [&](const CvProgress& p) {
      if (o.verbose) c.err << "fold " << p.fold + 1 << " (" << p.animal << "): " << p.stage << "\n";
    });
    report = cv_report(r, ds.class_names);
    if (!o.json) {
      for (const auto& v : r.variants) {
        std::ostringstream line;
        line << std::left << std::setw(8) << v.name << " MCC " << std::fixed << std::setprecision(4) << v.float_mcc;
        if (!v.quant_folds.empty()) line << "  quantized " << v.quant_mcc;
        c.out << line.str() << "\n";
      }
    }
  } else {
    if (o.model.empty()) throw InvalidInput("evaluate needs --model or --cv loao");
    const AnyModel m = load_any_model(o.model);
    check_compatible(arch_of(m), ds);
    std::vector<std::size_t> preds, labels;
    for (const auto& dp : ds.datapoints) {
      if (!o.animal.empty() && dp.animal_id != o.animal) continue;
      preds.push_back(argmax<float>(logits_of(m, dp.samples)));
      labels.push_back(dp.label);
    }
    if (preds.empty()) throw InvalidInput("no datapoints selected");
    report = metrics_report(confusion(preds, labels, ds.num_classes), ds.class_names);
    report["model"] = kind_of(m);
    if (!o.json && !o.report.empty()) c.out << "MCC " << report["mcc_multiclass"].get<double>() << "\n";
  }
  if (!o.report.empty()) {
    write_text_file(o.report, report.dump(2) + "\n");
  } else if (!o.json && o.cv.empty()) {
    c.out << report.dump(2) << "\n";
  }
  return report;
}

Window parse_window(const std::string& arg, const Architecture& a) {
  std::string text = arg;
  const auto first = arg.find_first_not_of(" \t\r\n");
  if (first == std::string::npos || arg[first] != '[') text = read_text_file(arg);
  FloatJson j;
  try {
    j = FloatJson::parse(text);
  } catch (const std::exception& e) {
    throw InvalidInput(std::string("window is not valid JSON: ") + e.what());
  }
  if (j.is_object() && j.contains("samples")) j = j["samples"];
  if (!j.is_array() || j.size() != a.sequence_length) {
    throw InvalidInput("window must be an array of " + std::to_string(a.sequence_length) + " samples");
  }
  Window w(a.sequence_length, a.input_dim);
  for (std::size_t t = 0; t < j.size(); ++t) {
    if (!j[t].is_array() || j[t].size() != a.input_dim) {
      throw InvalidInput("sample " + std::to_string(t) + " must have " + std::to_string(a.input_dim) + " values");
    }
    for (std::size_t k = 0; k < a.input_dim; ++k) {
      if (!j[t][k].is_number()) throw InvalidInput("sample " + std::to_string(t) + " has a non-numeric value");
      w(t, k) = j[t][k].get<float>();
      if (!std::isfinite(w(t, k))) throw InvalidInput("sample " + std::to_string(t) + " is not finite");
    }
  }
  return w;
}

json cmd_infer(Context& c) {
  const AnyModel m = load_any_model(c.o.model);
  const Window w = parse_window(c.o.window_json, arch_of(m));
  const Vector<float> logits = logits_of(m, w);
  const Vector<float> probs = softmax_t<float>(logits, 1.0);
  const std::size_t k = argmax<float>(logits);
  const auto names = class_names_of(m);
  json r{{"class", k}, {"class_name", names[k]}, {"probabilities", probs}, {"logits", logits}, {"model", kind_of(m)}};
  if (!c.o.json) {
    std::ostringstream line;
    line << names[k] << " (" << k << ")";
    for (std::size_t i = 0; i < probs.size(); ++i) line << "  " << names[i] << "=" << probs[i];
    c.out << line.str() << "\n";
  }
  return r;
}

template <typename F>
json time_ms(std::size_t repeats, F&& f) {
  std::vector<double> ms;
  volatile float sink = 0;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = sink + f()[0];
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms.size() % 2 ? ms[ms.size() / 2] : (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]) / 2;
  return {{"min", ms.front()}, {"median", median}, {"max", ms.back()}};
}

json cmd_bench(Context& c) {
  const Options& o = c.o;
  const AnyModel m = load_any_model(o.model);
  const Architecture& a = arch_of(m);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Window w(a.sequence_length, a.input_dim);
  for (std::size_t t = 0; t < a.sequence_length; ++t) {
    for (std::size_t k = 0; k < a.input_dim; ++k) w(t, k) = n(rng);
  }

  json r;
  r["model"] = kind_of(m);
  r["arch"] = {{"layers", a.num_gru_layers}, {"hidden", a.hidden_size}, {"sequence_length", a.sequence_length}};
  r["repeats"] = o.repeats;
  r["parameters"] = count_params(a);
  json timing;
  if (const auto* f = std::get_if<GruMlpModel>(&m)) {
    const OpTally ops = measured_forward_ops(w, *f);
    r["mults"] = {{"float", ops.float_mults}, {"int", ops.int_mults}, {"formula", count_mults(a)}};
    const QuantizedGruMlpModel qm = quantize_model(*f);
    timing["float"] = time_ms(o.repeats, [&] { return forward(w, *f); });
    timing["quantized_default_scales"] = time_ms(o.repeats, [&] { return q_forward(w, qm); });
  } else {
    const auto& qm = std::get<QuantizedGruMlpModel>(m);
    const QOpCounts ops = q_forward_ops(w, qm);
    r["mults"] = {{"float", ops.float_mults},
                  {"int", ops.int_mults},
                  {"kernel_float", ops.kernel_float_mults},
                  {"kernel_int", ops.kernel_int_mults}};
    timing["quantized"] = time_ms(o.repeats, [&] { return q_forward(w, qm); });
  }
  const double q7 = static_cast<double>(rodata_size_q7(a));
  const double fp = static_cast<double>(rodata_size_fp32(a));
  r["rodata_bytes"] = {{"q7", rodata_size_q7(a)}, {"fp32", rodata_size_fp32(a)}, {"ratio", q7 / fp}};
  r["model_file_bytes"] = fs::file_size(o.model);
  c.deterministic = r;
  r["timing_ms"] = timing;

  if (!o.json) {
    c.out << "model " << r["model"].get<std::string>() << ", " << r["parameters"] << " parameters\n";
    c.out << "mults " << r["mults"].dump() << "\n";
    for (const auto& [k, v] : timing.items()) c.out << "time " << k << " median " << v["median"] << " ms\n";
    c.out << "rodata q7 " << r["rodata_bytes"]["q7"] << " B, fp32 " << r["rodata_bytes"]["fp32"] << " B, ratio "
          << r["rodata_bytes"]["ratio"] << "\n";
  }
  return r;
}

// ---------------------------------------------------------------------------
// manifests

const std::vector<std::string> kPresentationOptions{"help", "config", "manifest"};

bool is_flag(const CLI::Option* opt) { return opt->get_expected_max() == 0; }

std::string long_name(const CLI::Option* opt) {
  return opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
}

std::string absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

std::optional<Role> role_of(const Command& cmd, const std::string& name) {
  for (const auto& [n, r] : cmd.paths) {
    if (n == name) return r;
  }
  return std::nullopt;
}

// Effective command line (explicit flags and config-file values) with paths made absolute.
std::vector<std::string> effective_argv(const Command& cmd) {
  std::vector<std::string> argv;
  for (const CLI::Option* opt : cmd.app->get_options()) {
    const std::string name = long_name(opt);
    if (std::find(kPresentationOptions.begin(), kPresentationOptions.end(), name) != kPresentationOptions.end()) continue;
    if (opt->count() == 0) continue;
    if (is_flag(opt)) {
      if (opt->as<bool>()) argv.push_back("--" + name);
      continue;
    }
    const bool path = role_of(cmd, name).has_value();
    for (const auto& v : opt->results()) {
      argv.push_back("--" + name);
      argv.push_back(path ? absolute_path(v) : v);
    }
  }
  return argv;
}

json config_snapshot(const Command& cmd) {
  json j = json::object();
  for (const CLI::Option* opt : cmd.app->get_options()) {
    const std::string name = long_name(opt);
    if (std::find(kPresentationOptions.begin(), kPresentationOptions.end(), name) != kPresentationOptions.end()) continue;
    if (opt->count() > 0) {
      if (is_flag(opt)) {
        j[name] = opt->as<bool>();
      } else if (opt->results().size() == 1) {
        j[name] = opt->results().front();
      } else {
        j[name] = opt->results();
      }
    } else {
      j[name] = is_flag(opt) ? json(false) : json(opt->get_default_str());
    }
  }
  return j;
}

std::string option_value(const Command& cmd, const std::string& name) {
  const CLI::Option* opt = cmd.app->get_option_no_throw("--" + name);
  return opt && opt->count() > 0 ? opt->results().front() : std::string();
}

json path_entries(const Command& cmd, Role role, bool hash) {
  json list = json::array();
  for (const auto& [name, r] : cmd.paths) {
    if (r != role) continue;
    const std::string v = option_value(cmd, name);
    if (v.empty()) continue;
    json e{{"flag", "--" + name}, {"path", absolute_path(v)}};
    if (hash) e["sha256"] = sha256_file(v);
    list.push_back(std::move(e));
  }
  return list;
}

// ---------------------------------------------------------------------------
// rerun

json cmd_rerun(Context& c) {
  const Options& o = c.o;
  FloatJson m;
  try {
    m = FloatJson::parse(read_text_file(o.rerun_manifest));
  } catch (const FloatJson::exception& e) {
    throw DataContractError(o.rerun_manifest + ": not a manifest: " + e.what());
  }
  if (!m.is_object() || m.value("tool", "") != "kdq" || !m.contains("argv") || !m.contains("command")) {
    throw DataContractError(o.rerun_manifest + ": not a kdq manifest");
  }
  for (const auto& in : m.value("inputs", FloatJson::array())) {
    const std::string path = in.at("path");
    if (!fs::exists(path)) throw DataContractError("input " + path + " is missing");
    if (sha256_file(path) != in.at("sha256").get<std::string>()) throw DataContractError("input " + path + " has changed");
  }

  std::vector<std::string> args{m.at("command").get<std::string>()};
  const auto argv = m.at("argv").get<std::vector<std::string>>();
  std::set<std::string> redirected;
  if (!o.out_dir.empty()) {
    fs::create_directories(o.out_dir);
    for (const auto* key : {"outputs", "logs"}) {
      for (const auto& e : m.value(key, FloatJson::array())) {
        if (e.contains("flag")) redirected.insert(e.at("flag").get<std::string>());
      }
    }
  }
  for (std::size_t i = 0; i < argv.size(); ++i) {
    args.push_back(argv[i]);
    if (redirected.count(argv[i]) && i + 1 < argv.size()) {
      args.push_back((fs::path(o.out_dir) / fs::path(argv[i + 1]).filename()).string());
      ++i;
    }
  }
  const fs::path manifest_dir = o.out_dir.empty() ? fs::temp_directory_path() : fs::path(o.out_dir);
  const fs::path new_manifest =
      manifest_dir / ("kdq-rerun-" + std::to_string(::getpid()) + "-" + args.front() + ".manifest.json");
  args.push_back("--manifest");
  args.push_back(new_manifest.string());

  std::ostringstream sub_out, sub_err;
  const int code = run(args, sub_out, sub_err);
  if (code != kExitOk) {
    c.err << sub_err.str();
    throw std::runtime_error("re-run exited with code " + std::to_string(code));
  }
  const FloatJson fresh = FloatJson::parse(read_text_file(new_manifest));
  if (o.out_dir.empty()) fs::remove(new_manifest);

  json outputs = json::array();
  bool identical = true;
  const auto& before = m.at("outputs");
  const auto& after = fresh.at("outputs");
  if (before.size() != after.size()) identical = false;
  for (std::size_t i = 0; i < std::min(before.size(), after.size()); ++i) {
    const std::string want = before[i].at("sha256");
    const std::string got = after[i].at("sha256");
    json e{{"expected", want}, {"actual", got}, {"identical", want == got}};
    if (after[i].contains("path")) e["path"] = after[i].at("path").get<std::string>();
    if (after[i].contains("stream")) e["stream"] = after[i].at("stream").get<std::string>();
    identical = identical && want == got;
    outputs.push_back(std::move(e));
  }
  json r{{"command", args.front()}, {"identical", identical}, {"outputs", outputs}};
  if (!o.json) {
    for (const auto& e : outputs) {
      c.out << (e["identical"].get<bool>() ? "identical " : "DIFFERENT ")
            << (e.contains("path") ? e["path"].get<std::string>() : "<stdout>") << "\n";
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// wiring

void add_training_options(CLI::App* s, Options& o) {
  s->add_option("--arch", o.arch, "Architecture, e.g. gru(1,32)")->capture_default_str();
  s->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
  s->add_option("--lr", o.lr, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--seed", o.seed, "Initialization and shuffling seed")->capture_default_str();
  s->add_option("--optimizer", o.optimizer, "adam or sgd")->capture_default_str();
  s->add_option("--momentum", o.momentum, "SGD momentum")->capture_default_str();
  s->add_option("--clip", o.clip, "Global gradient-norm clip")->capture_default_str();
}

void add_kd_options(CLI::App* s, Options& o) {
  s->add_option("--alpha", o.alpha, "Weight of the hard-label loss")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  s->add_option("--temperature", o.temperature, "Softmax temperature")->capture_default_str()->check(CLI::PositiveNumber);
}

std::map<std::string, Command> build(CLI::App& app, Options& o) {
  std::map<std::string, Command> cmds;
  auto sub = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--manifest", o.manifest, "Run manifest path (default: <output>.manifest.json)");
    return s;
  };

  {
    CLI::App* s = sub("gen-data", "Generate the synthetic three-class dataset");
    s->add_option("--animals", o.animals, "Number of animals")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--windows", o.windows, "Windows per animal")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seq-len", o.seq_len, "Samples per window")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seed", o.data_seed, "Generator seed")->capture_default_str();
    s->add_option("--out", o.out, "Output JSONL path")->required();
    cmds["gen-data"] = {s, {{"out", Role::kOutput}}, cmd_gen_data};
  }
  for (const bool kd : {false, true}) {
    CLI::App* s = kd ? sub("distill", "Train a student on hard labels and teacher logits")
                     : sub("train", "Train a GRU-MLP on hard labels");
    s->add_option("--data", o.data, "JSONL dataset")->required()->check(CLI::ExistingFile);
    add_training_options(s, o);
    if (kd) {
      add_kd_options(s, o);
      s->add_option("--soft-labels", o.soft_labels, "Teacher logit CSV")->required()->check(CLI::ExistingFile);
    }
    s->add_option("--holdout", o.holdout, "Animal excluded from training and used for validation logging");
    s->add_option("--encoding", o.encoding, "Tensor encoding: base64 or decimal")->capture_default_str();
    s->add_option("--out", o.out, "Output model JSON")->required();
    s->add_option("--log", o.log, "Per-epoch JSONL log");
    std::vector<std::pair<std::string, Role>> paths{{"data", Role::kInput}, {"out", Role::kOutput}, {"log", Role::kLog}};
    if (kd) paths.emplace_back("soft-labels", Role::kInput);
    cmds[kd ? "distill" : "train"] = {s, paths, [kd](Context& c) { return train_or_distill(c, kd); }};
  }
  {
    CLI::App* s = sub("teacher-logits", "Record a model's raw logits as a soft-label CSV");
    s->add_option("--model", o.model, "Float or quantized model JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--data", o.data, "JSONL dataset")->required()->check(CLI::ExistingFile);
    s->add_option("--holdout", o.holdout, "Animal to leave out of the labels");
    s->add_option("--out", o.out, "Output CSV")->required();
    cmds["teacher-logits"] = {
        s, {{"model", Role::kInput}, {"data", Role::kInput}, {"out", Role::kOutput}}, cmd_teacher_logits};
  }
  {
    CLI::App* s = sub("quantize", "Quantize a float model to Q7 weights");
    s->add_option("--model", o.model, "Float model JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--out", o.out, "Output quantized model JSON")->required();
    auto* sa = s->add_option("--sa", o.sa, "Input scale of the first GRU layer (power of two)")->capture_default_str();
    auto* sh = s->add_option("--sh", o.sh, "Input scale of hidden states (power of two)")->capture_default_str();
    auto* sm = s->add_option("--sm", o.sm, "Input scale of the MLP output layer (power of two)")->capture_default_str();
    auto* tune = s->add_flag("--tune", o.tune, "Search the power-of-two grid for the best MCC on --data");
    tune->excludes(sa)->excludes(sh)->excludes(sm);
    s->add_option("--data", o.data, "Calibration dataset for --tune")->check(CLI::ExistingFile);
    s->add_option("--holdout", o.holdout, "Animal excluded from calibration");
    s->add_option("--calibration-limit", o.calibration_limit, "Upper bound on calibration windows (0 = all)")
        ->capture_default_str();
    s->add_option("--rodata", o.rodata, "Also write the packed Q7 parameter image");
    cmds["quantize"] = {s,
                        {{"model", Role::kInput}, {"data", Role::kInput}, {"out", Role::kOutput}, {"rodata", Role::kOutput}},
                        cmd_quantize};
  }
  {
    CLI::App* s = sub("evaluate", "Score a model, or run leave-one-animal-out cross-validation");
    s->add_option("--data", o.data, "JSONL dataset")->required()->check(CLI::ExistingFile);
    s->add_option("--model", o.model, "Float or quantized model JSON")->check(CLI::ExistingFile);
    s->add_option("--animal", o.animal, "Score only this animal's windows");
    s->add_option("--cv", o.cv, "Cross-validation scheme (loao)");
    s->add_option("--report", o.report, "Write the metrics report here instead of stdout");
    s->add_option("--student-arch", o.student_arch, "Student architecture for --cv")->capture_default_str();
    s->add_option("--teacher-arch", o.teacher_arch, "Teacher architecture for --cv")->capture_default_str();
    s->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
    s->add_option("--lr", o.lr, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seed", o.seed, "Seed for every model")->capture_default_str();
    s->add_option("--optimizer", o.optimizer, "adam or sgd")->capture_default_str();
    s->add_option("--momentum", o.momentum, "SGD momentum")->capture_default_str();
    s->add_option("--clip", o.clip, "Global gradient-norm clip")->capture_default_str();
    add_kd_options(s, o);
    s->add_option("--variants", o.variants, "Any of teacher, no_kd, kd, self_kd")->capture_default_str()->delimiter(',');
    s->add_flag("--no-quantize", o.no_quantize, "Skip quantization and scale tuning");
    s->add_option("--calibration-limit", o.calibration_limit, "Upper bound on calibration windows (0 = all)")
        ->capture_default_str();
    s->add_option("--threads", o.threads, "Folds evaluated concurrently")->capture_default_str()->check(CLI::PositiveNumber);
    cmds["evaluate"] = {
        s, {{"data", Role::kInput}, {"model", Role::kInput}, {"report", Role::kOutput}}, cmd_evaluate};
  }
  {
    CLI::App* s = sub("infer", "Classify one window");
    s->add_option("--model", o.model, "Float or quantized model JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--window-json", o.window_json, "Window as inline JSON or a path to a JSON file")->required();
    cmds["infer"] = {s, {{"model", Role::kInput}}, cmd_infer};
  }
  {
    CLI::App* s = sub("bench", "Latency, multiply counts and parameter image sizes");
    s->add_option("--model", o.model, "Float or quantized model JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--repeats", o.repeats, "Timed forward passes")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seed", o.seed, "Seed of the random input window")->capture_default_str();
    cmds["bench"] = {s, {{"model", Role::kInput}}, cmd_bench};
  }
  {
    CLI::App* s = app.add_subcommand("rerun", "Repeat a command from its manifest and compare output digests");
    s->add_option("manifest", o.rerun_manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--out-dir", o.out_dir, "Write outputs here instead of over the originals");
    cmds["rerun"] = {s, {}, cmd_rerun};
  }
  return cmds;
}

void write_manifest(const std::string& name, const Command& cmd, const Context& c, const json& result,
                    double wall_ms) {
  json outputs = path_entries(cmd, Role::kOutput, true);
  if (outputs.empty()) {
    outputs.push_back({{"stream", "stdout"}, {"sha256", sha256_hex(c.deterministic.value_or(result).dump())}});
  }
  std::string path = c.o.manifest;
  if (path.empty()) {
    const std::string primary = option_value(cmd, "out").empty() ? option_value(cmd, "report") : option_value(cmd, "out");
    if (primary.empty()) return;  // stdout-only run without --manifest
    path = primary + ".manifest.json";
  }
  json m;
  m["tool"] = "kdq";
  m["version"] = KDQ_VERSION;
  m["command"] = name;
  m["argv"] = effective_argv(cmd);
  m["config"] = config_snapshot(cmd);
  if (const std::string seed = option_value(cmd, "seed"); !seed.empty()) m["seed"] = seed;
  m["inputs"] = path_entries(cmd, Role::kInput, true);
  m["outputs"] = std::move(outputs);
  m["logs"] = path_entries(cmd, Role::kLog, false);
  m["results"] = result;
  m["wall_ms"] = wall_ms;
  write_text_file(path, m.dump(2) + "\n");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Knowledge distillation and Q7 quantization for GRU-MLP behavior classifiers", "kdq"};
  app.set_version_flag("--version", KDQ_VERSION);
  app.add_flag("--json", o.json, "Print machine-readable JSON on stdout");
  app.add_flag("-v,--verbose", o.verbose, "Progress on stderr");
  app.config_formatter(std::make_shared<JsonConfig>(app));
  app.set_config("--config", "", "JSON object of default flag values for the command (command-line flags win)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  const auto cmds = build(app, o);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ConfigError& e) {
    const std::string what = e.what();
    const auto at = what.rfind(' ');
    err << "kdq: config file has an unknown or unusable key '" << what.substr(at + 1) << "'\n";
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const Command& cmd = cmds.at(name);
  Context ctx{o, out, err, std::nullopt};
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const json result = cmd.run(ctx);
    const double wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (o.json) out << result.dump(2) << "\n";
    if (name != "rerun") {
      write_manifest(name, cmd, ctx, result, wall_ms);
    } else if (!result.at("identical").get<bool>()) {
      return kExitInternal;
    }
    return kExitOk;
  } catch (const InvalidInput& e) {
    err << "kdq " << name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataContractError& e) {
    err << "kdq " << name << ": " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "kdq " << name << ": " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace kdq::cli

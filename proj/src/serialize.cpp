#include "kdq/serialize.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <map>

#include "kdq/errors.hpp"

namespace kdq {

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw DataContractError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw DataContractError("base64: invalid character");
  // EVP_DecodeBlock keeps the zero bytes that padding stands for
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

[[noreturn]] void contract(const std::string& what) { throw DataContractError("model file: " + what); }

// Runs a JSON accessor and turns library exceptions into contract errors.
template <typename F>
auto guarded(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DataContractError&) {
    throw;
  } catch (const InvalidInput& e) {
    contract(std::string(what) + ": " + e.what());
  } catch (const std::exception& e) {
    contract(std::string(what) + ": " + e.what());
  }
}

FloatJson float_array(std::span<const float> v) {
  FloatJson a = FloatJson::array();
  for (float x : v) a.push_back(x);
  return a;
}

std::vector<float> read_floats(const FloatJson& j, std::size_t expected, const std::string& name) {
  if (!j.is_array() || j.size() != expected) contract(name + ": expected " + std::to_string(expected) + " values");
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    if (!j[i].is_number()) contract(name + ": non-numeric entry");
    out[i] = j[i].get<float>();
  }
  return out;
}

FloatJson encode_tensor(std::span<const float> data, std::size_t rows, std::size_t cols, bool matrix,
                        FloatEncoding enc) {
  FloatJson t;
  t["shape"] = matrix ? FloatJson::array({rows, cols}) : FloatJson::array({data.size()});
  if (enc == FloatEncoding::kBase64) {
    t["data"] = base64_encode({reinterpret_cast<const std::uint8_t*>(data.data()), data.size() * sizeof(float)});
  } else if (matrix) {
    FloatJson rows_json = FloatJson::array();
    for (std::size_t i = 0; i < rows; ++i) rows_json.push_back(float_array(data.subspan(i * cols, cols)));
    t["data"] = std::move(rows_json);
  } else {
    t["data"] = float_array(data);
  }
  return t;
}

void decode_tensor(const FloatJson& t, std::span<float> out, std::size_t rows, std::size_t cols, bool matrix,
                   const std::string& name) {
  const FloatJson& shape = t.at("shape");
  const std::vector<std::size_t> want = matrix ? std::vector<std::size_t>{rows, cols} : std::vector<std::size_t>{out.size()};
  if (shape.get<std::vector<std::size_t>>() != want) contract(name + ": shape does not match the architecture");
  const FloatJson& data = t.at("data");
  if (data.is_string()) {
    const auto bytes = base64_decode(data.get<std::string>());
    if (bytes.size() != out.size() * sizeof(float)) contract(name + ": wrong byte count");
    std::memcpy(out.data(), bytes.data(), bytes.size());
  } else if (matrix) {
    if (!data.is_array() || data.size() != rows) contract(name + ": expected " + std::to_string(rows) + " rows");
    for (std::size_t i = 0; i < rows; ++i) {
      const auto row = read_floats(data[i], cols, name);
      std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
  } else {
    const auto v = read_floats(data, out.size(), name);
    std::copy(v.begin(), v.end(), out.begin());
  }
  for (float v : out) {
    if (!std::isfinite(v)) contract(name + ": non-finite value");
  }
}

void check_header(const FloatJson& doc, const char* format) {
  if (!doc.is_object() || !doc.contains("format")) contract("missing \"format\" field");
  if (doc.at("format") != format) contract("expected format " + std::string(format));
  if (doc.at("version") != kModelFormatVersion) {
    contract("unsupported version " + doc.at("version").dump());
  }
}

FloatJson metadata_json(const std::map<std::string, std::string>& md) {
  FloatJson j = FloatJson::object();
  for (const auto& [k, v] : md) j[k] = v;
  return j;
}

std::map<std::string, std::string> metadata_from(const FloatJson& doc) {
  std::map<std::string, std::string> out;
  if (doc.contains("metadata")) {
    for (const auto& [k, v] : doc.at("metadata").items()) out[k] = v.get<std::string>();
  }
  return out;
}

// Visits (name, shape) of every weight and bias in for_each_param order.
template <typename F>
void visit_shapes(const Architecture& a, F&& f) {
  const std::size_t L = a.hidden_size, H = a.mlp_hidden();
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
    const std::string p = "gru" + std::to_string(l) + ".";
    for (const char* g : {"reset", "update", "candidate"}) {
      f(p + g + ".input_weights", L, a.layer_input(l), true);
      f(p + g + ".hidden_weights", L, L, true);
      f(p + g + ".input_bias", L, 1, false);
      f(p + g + ".hidden_bias", L, 1, false);
    }
  }
  f(std::string("mlp.hidden_weights"), H, L, true);
  f(std::string("mlp.hidden_bias"), H, 1, false);
  f(std::string("mlp.output_weights"), a.num_classes, H, true);
  f(std::string("mlp.output_bias"), a.num_classes, 1, false);
}

}  // namespace

FloatJson arch_to_json(const Architecture& a) {
  FloatJson j;
  j["layers"] = a.num_gru_layers;
  j["hidden"] = a.hidden_size;
  j["classes"] = a.num_classes;
  j["sequence_length"] = a.sequence_length;
  j["input_dim"] = a.input_dim;
  j["mlp_hidden"] = a.mlp_hidden();
  return j;
}

Architecture arch_from_json(const FloatJson& j) {
  return guarded("arch", [&] {
    Architecture a;
    a.num_gru_layers = j.at("layers").get<std::size_t>();
    a.hidden_size = j.at("hidden").get<std::size_t>();
    a.num_classes = j.at("classes").get<std::size_t>();
    a.sequence_length = j.at("sequence_length").get<std::size_t>();
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.validate();
    if (j.contains("mlp_hidden") && j.at("mlp_hidden").get<std::size_t>() != a.mlp_hidden()) {
      contract("mlp_hidden must equal floor((hidden + classes) / 2)");
    }
    return a;
  });
}

FloatJson model_to_json(const GruMlpModel& model, FloatEncoding encoding) {
  model.validate();
  FloatJson doc;
  doc["format"] = kFloatModelFormat;
  doc["version"] = kModelFormatVersion;
  doc["encoding"] = encoding == FloatEncoding::kBase64 ? "base64-f32le" : "decimal";
  doc["arch"] = arch_to_json(model.arch);
  doc["normalization"] = {{"mean", encode_tensor(model.norm_mean, 0, 0, false, encoding)},
                          {"inv_std", encode_tensor(model.norm_inv_std, 0, 0, false, encoding)}};
  FloatJson tensors = FloatJson::object();
  std::vector<std::span<const float>> spans;
  model.for_each_param([&](const std::string&, std::span<const float> s) { spans.push_back(s); });
  std::size_t k = 0;
  visit_shapes(model.arch, [&](const std::string& name, std::size_t r, std::size_t c, bool matrix) {
    tensors[name] = encode_tensor(spans[k++], r, c, matrix, encoding);
  });
  doc["tensors"] = std::move(tensors);
  doc["metadata"] = metadata_json(model.metadata);
  return doc;
}

GruMlpModel model_from_json(const FloatJson& doc) {
  return guarded("float model", [&] {
    check_header(doc, kFloatModelFormat);
    const Architecture a = arch_from_json(doc.at("arch"));
    GruMlpModel m = GruMlpModel::zeros(a);
    decode_tensor(doc.at("normalization").at("mean"), m.norm_mean, 0, 0, false, "normalization.mean");
    decode_tensor(doc.at("normalization").at("inv_std"), m.norm_inv_std, 0, 0, false, "normalization.inv_std");
    std::vector<std::span<float>> spans;
    m.for_each_param([&](const std::string&, std::span<float> s) { spans.push_back(s); });
    const FloatJson& tensors = doc.at("tensors");
    std::size_t k = 0, seen = 0;
    visit_shapes(a, [&](const std::string& name, std::size_t r, std::size_t c, bool matrix) {
      if (!tensors.contains(name)) contract("missing tensor " + name);
      decode_tensor(tensors.at(name), spans[k++], r, c, matrix, name);
      ++seen;
    });
    if (tensors.size() != seen) contract("unexpected extra tensors");
    m.metadata = metadata_from(doc);
    try {
      m.validate();
    } catch (const InvalidInput& e) {
      contract(e.what());
    }
    return m;
  });
}

namespace {

FloatJson q7_json(const Q7Matrix& m, float rescale) {
  FloatJson t;
  t["shape"] = FloatJson::array({m.rows(), m.cols()});
  t["scale"] = m.scale();
  t["rescale"] = rescale;
  FloatJson rows = FloatJson::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    FloatJson row = FloatJson::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(static_cast<int>(m.at(i, j)));
    rows.push_back(std::move(row));
  }
  t["data"] = std::move(rows);
  return t;
}

Q7Matrix q7_from_json(const FloatJson& t, std::size_t rows, std::size_t cols, float& rescale, const std::string& name) {
  if (t.at("shape").get<std::vector<std::size_t>>() != std::vector<std::size_t>{rows, cols}) {
    contract(name + ": shape does not match the architecture");
  }
  const FloatJson& data = t.at("data");
  if (!data.is_array() || data.size() != rows) contract(name + ": expected " + std::to_string(rows) + " rows");
  std::vector<std::int8_t> q;
  q.reserve(rows * cols);
  for (const auto& row : data) {
    if (!row.is_array() || row.size() != cols) contract(name + ": ragged row");
    for (const auto& v : row) {
      if (!v.is_number_integer()) contract(name + ": weights must be integers");
      const auto x = v.get<std::int64_t>();
      if (x < -128 || x > 127) contract(name + ": weight outside [-128, 127]");
      q.push_back(static_cast<std::int8_t>(x));
    }
  }
  rescale = t.at("rescale").get<float>();
  try {
    return Q7Matrix(rows, cols, std::move(q), t.at("scale").get<float>());
  } catch (const InvalidInput& e) {
    contract(name + ": " + e.what());
  }
}

FloatJson bias_json(const Vector<float>& b) { return {{"shape", FloatJson::array({b.size()})}, {"data", float_array(b)}}; }

Vector<float> bias_from_json(const FloatJson& t, std::size_t n, const std::string& name) {
  Vector<float> out(n);
  decode_tensor(t, out, 0, 0, false, name);
  return out;
}

}  // namespace

FloatJson qmodel_to_json(const QuantizedGruMlpModel& qm) {
  qm.validate();
  FloatJson doc;
  doc["format"] = kQuantModelFormat;
  doc["version"] = kModelFormatVersion;
  doc["arch"] = arch_to_json(qm.arch);
  doc["scales"] = {{"s_a", qm.scales.s_a}, {"s_h", qm.scales.s_h}, {"s_m", qm.scales.s_m}};
  doc["normalization"] = {{"mean", bias_json(qm.norm_mean)}, {"inv_std", bias_json(qm.norm_inv_std)}};
  FloatJson tensors = FloatJson::object();
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    const std::string p = "gru" + std::to_string(l) + ".";
    const std::pair<const char*, const QGate*> gates[] = {
        {"reset", &qm.layers[l].reset}, {"update", &qm.layers[l].update}, {"candidate", &qm.layers[l].candidate}};
    for (const auto& [name, g] : gates) {
      tensors[p + name + ".input_weights"] = q7_json(g->input_weights, g->input_rescale);
      tensors[p + name + ".hidden_weights"] = q7_json(g->hidden_weights, g->hidden_rescale);
      tensors[p + name + ".input_bias"] = bias_json(g->input_bias);
      tensors[p + name + ".hidden_bias"] = bias_json(g->hidden_bias);
    }
  }
  tensors["mlp.hidden_weights"] = q7_json(qm.mlp.hidden_weights, qm.mlp.hidden_rescale);
  tensors["mlp.hidden_bias"] = bias_json(qm.mlp.hidden_bias);
  tensors["mlp.output_weights"] = q7_json(qm.mlp.output_weights, qm.mlp.output_rescale);
  tensors["mlp.output_bias"] = bias_json(qm.mlp.output_bias);
  doc["tensors"] = std::move(tensors);
  doc["metadata"] = metadata_json(qm.metadata);
  return doc;
}

QuantizedGruMlpModel qmodel_from_json(const FloatJson& doc) {
  return guarded("quantized model", [&] {
    check_header(doc, kQuantModelFormat);
    QuantizedGruMlpModel qm;
    qm.arch = arch_from_json(doc.at("arch"));
    const Architecture& a = qm.arch;
    const FloatJson& s = doc.at("scales");
    qm.scales = {s.at("s_a").get<float>(), s.at("s_h").get<float>(), s.at("s_m").get<float>()};
    qm.norm_mean = bias_from_json(doc.at("normalization").at("mean"), a.input_dim, "normalization.mean");
    qm.norm_inv_std = bias_from_json(doc.at("normalization").at("inv_std"), a.input_dim, "normalization.inv_std");
    const FloatJson& t = doc.at("tensors");
    const std::size_t L = a.hidden_size, H = a.mlp_hidden();
    for (std::size_t l = 0; l < a.num_gru_layers; ++l) {
      const std::string p = "gru" + std::to_string(l) + ".";
      QGruLayer layer;
      const std::pair<const char*, QGate*> gates[] = {
          {"reset", &layer.reset}, {"update", &layer.update}, {"candidate", &layer.candidate}};
      for (const auto& [name, g] : gates) {
        const std::string b = p + name;
        g->input_weights = q7_from_json(t.at(b + ".input_weights"), L, a.layer_input(l), g->input_rescale, b);
        g->hidden_weights = q7_from_json(t.at(b + ".hidden_weights"), L, L, g->hidden_rescale, b);
        g->input_bias = bias_from_json(t.at(b + ".input_bias"), L, b + ".input_bias");
        g->hidden_bias = bias_from_json(t.at(b + ".hidden_bias"), L, b + ".hidden_bias");
      }
      qm.layers.push_back(std::move(layer));
    }
    qm.mlp.hidden_weights = q7_from_json(t.at("mlp.hidden_weights"), H, L, qm.mlp.hidden_rescale, "mlp.hidden_weights");
    qm.mlp.hidden_bias = bias_from_json(t.at("mlp.hidden_bias"), H, "mlp.hidden_bias");
    qm.mlp.output_weights =
        q7_from_json(t.at("mlp.output_weights"), a.num_classes, H, qm.mlp.output_rescale, "mlp.output_weights");
    qm.mlp.output_bias = bias_from_json(t.at("mlp.output_bias"), a.num_classes, "mlp.output_bias");
    qm.metadata = metadata_from(doc);
    try {
      qm.validate();
    } catch (const InvalidInput& e) {
      contract(e.what());
    }
    return qm;
  });
}

void save_model(const GruMlpModel& model, const std::filesystem::path& path, FloatEncoding encoding) {
  write_text_file(path, model_to_json(model, encoding).dump(1) + "\n");
}

void save_qmodel(const QuantizedGruMlpModel& qmodel, const std::filesystem::path& path) {
  write_text_file(path, qmodel_to_json(qmodel).dump(1) + "\n");
}

AnyModel load_any_model(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  FloatJson doc;
  try {
    doc = FloatJson::parse(text);
  } catch (const std::exception& e) {
    throw DataContractError(path.string() + ": not valid JSON: " + e.what());
  }
  const std::string format = doc.is_object() && doc.contains("format") && doc["format"].is_string()
                                 ? doc["format"].get<std::string>()
                                 : std::string();
  if (format == kFloatModelFormat) return model_from_json(doc);
  if (format == kQuantModelFormat) return qmodel_from_json(doc);
  throw DataContractError(path.string() + ": unknown model format '" + format + "'");
}

GruMlpModel load_model(const std::filesystem::path& path) {
  AnyModel m = load_any_model(path);
  if (auto* f = std::get_if<GruMlpModel>(&m)) return std::move(*f);
  throw DataContractError(path.string() + ": expected a float model, found a quantized one");
}

QuantizedGruMlpModel load_qmodel(const std::filesystem::path& path) {
  AnyModel m = load_any_model(path);
  if (auto* q = std::get_if<QuantizedGruMlpModel>(&m)) return std::move(*q);
  throw DataContractError(path.string() + ": expected a quantized model, found a float one");
}

}  // namespace kdq

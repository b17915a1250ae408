#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include <unistd.h>

#include "kdq/errors.hpp"
#include "kdq/serialize.hpp"
#include "support.hpp"

using namespace kdq;

namespace {

Architecture small_arch(std::size_t layers = 2) {
  Architecture a;
  a.num_gru_layers = layers;
  a.hidden_size = 4;
  a.num_classes = 3;
  a.sequence_length = 8;
  return a;
}

bool bitwise_equal(const GruMlpModel& a, const GruMlpModel& b) {
  if (!(a.arch == b.arch) || a.metadata != b.metadata) return false;
  auto same = [](std::span<const float> x, std::span<const float> y) {
    return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  };
  if (!same(a.norm_mean, b.norm_mean) || !same(a.norm_inv_std, b.norm_inv_std)) return false;
  std::vector<std::span<const float>> xs, ys;
  a.for_each_param([&](const std::string&, std::span<const float> s) { xs.push_back(s); });
  b.for_each_param([&](const std::string&, std::span<const float> s) { ys.push_back(s); });
  if (xs.size() != ys.size()) return false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!same(xs[i], ys[i])) return false;
  }
  return true;
}

// Model whose values include the awkward corners of float text conversion.
GruMlpModel awkward_model() {
  GruMlpModel m = testing::random_model(small_arch(), 11);
  auto& w = m.layers[0].reset.input_weights.data;
  w[0] = -0.0f;
  w[1] = std::numeric_limits<float>::denorm_min();
  w[2] = std::numeric_limits<float>::max();
  w[3] = 0.1f;
  w[4] = 1.0f / 3.0f;
  w[5] = std::nextafter(1.0f, 2.0f);
  m.norm_mean = {0.25f, -1e-30f, 3.4e5f};
  m.norm_inv_std = {1.0f, 7.0f, 1e-3f};
  m.metadata = {{"seed", "4"}, {"training", "kd"}};
  return m;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("kdq_serialize_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("base64 vectors") {
  auto enc = [](const std::string& s) {
    return base64_encode({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  };
  CHECK(enc("") == "");
  CHECK(enc("f") == "Zg==");
  CHECK(enc("fo") == "Zm8=");
  CHECK(enc("foo") == "Zm9v");
  CHECK(enc("foob") == "Zm9vYg==");
  CHECK(enc("foobar") == "Zm9vYmFy");
  for (const std::string s : {"", "f", "fo", "foo", "foob", "fooba", "foobar"}) {
    const auto bytes = base64_decode(enc(s));
    CHECK(std::string(bytes.begin(), bytes.end()) == s);
  }
  CHECK_THROWS_AS(base64_decode("Zm9"), DataContractError);
  CHECK_THROWS_AS(base64_decode("Zm9*"), DataContractError);
}

TEST_CASE("float model round trip is bit-exact in both encodings") {
  const GruMlpModel m = awkward_model();
  for (FloatEncoding enc : {FloatEncoding::kBase64, FloatEncoding::kDecimal}) {
    const std::string text = model_to_json(m, enc).dump();
    const GruMlpModel back = model_from_json(FloatJson::parse(text));
    CHECK(bitwise_equal(m, back));
    CHECK(std::signbit(back.layers[0].reset.input_weights.data[0]));
  }
}

TEST_CASE("document layout") {
  const GruMlpModel m = testing::random_model(small_arch(), 2);
  const FloatJson dec = model_to_json(m, FloatEncoding::kDecimal);
  CHECK(dec["format"] == "kdq-model");
  CHECK(dec["version"] == 1);
  CHECK(dec["encoding"] == "decimal");
  CHECK(dec["arch"]["mlp_hidden"] == 3);
  const FloatJson& t = dec["tensors"]["gru1.update.input_weights"];
  CHECK(t["shape"] == FloatJson::array({4, 4}));
  REQUIRE(t["data"].is_array());
  CHECK(t["data"].size() == 4);
  CHECK(t["data"][0].size() == 4);
  CHECK(dec["tensors"]["gru0.reset.input_weights"]["shape"] == FloatJson::array({4, 3}));
  CHECK(dec["tensors"]["mlp.output_bias"]["data"].size() == 3);
  CHECK(dec["tensors"].size() == 2 * 12 + 4);

  const FloatJson b64 = model_to_json(m, FloatEncoding::kBase64);
  CHECK(b64["encoding"] == "base64-f32le");
  // 4x3 floats, 48 bytes, 64 base64 characters
  CHECK(b64["tensors"]["gru0.reset.input_weights"]["data"].get<std::string>().size() == 64);
}

TEST_CASE("float model rejections") {
  const GruMlpModel m = testing::random_model(small_arch(), 5);
  const FloatJson good = model_to_json(m, FloatEncoding::kDecimal);

  auto rejects = [](FloatJson doc) { CHECK_THROWS_AS(model_from_json(doc), DataContractError); };

  FloatJson d = good;
  d["version"] = 2;
  rejects(d);

  d = good;
  d["format"] = "kdq-qmodel";
  rejects(d);

  d = good;
  d["tensors"].erase("mlp.hidden_bias");
  rejects(d);

  d = good;
  d["tensors"]["extra"] = good["tensors"]["mlp.hidden_bias"];
  rejects(d);

  d = good;
  d["tensors"]["gru0.reset.input_weights"]["shape"] = FloatJson::array({3, 4});
  rejects(d);

  d = good;
  d["tensors"]["gru0.reset.input_weights"]["data"][1].erase(0);
  rejects(d);

  d = good;
  d["tensors"]["mlp.output_bias"]["data"][0] = "x";
  rejects(d);

  d = good;
  d["arch"]["mlp_hidden"] = 5;
  rejects(d);

  d = good;
  d["arch"]["hidden"] = 0;
  rejects(d);

  // non-finite values can only sneak in through base64
  GruMlpModel bad = m;
  bad.mlp.output_bias[1] = std::numeric_limits<float>::quiet_NaN();
  FloatJson b = model_to_json(m, FloatEncoding::kBase64);
  b["tensors"]["mlp.output_bias"] = {
      {"shape", FloatJson::array({3})},
      {"data", base64_encode({reinterpret_cast<const std::uint8_t*>(bad.mlp.output_bias.data()), 12})}};
  rejects(b);
  b["tensors"]["mlp.output_bias"]["data"] = "AAAA";
  rejects(b);
}

TEST_CASE("quantized model round trip") {
  const GruMlpModel m = testing::random_model(small_arch(), 8);
  const QuantizedGruMlpModel qm = quantize_model(m, {2.0f, 0.5f, 0.25f});
  const FloatJson doc = qmodel_to_json(qm);
  CHECK(doc["format"] == "kdq-qmodel");
  const FloatJson& w = doc["tensors"]["gru1.candidate.hidden_weights"];
  CHECK(w["data"][2][3].is_number_integer());
  CHECK(w["scale"].get<float>() == qm.layers[1].candidate.hidden_weights.scale());
  const QuantizedGruMlpModel back = qmodel_from_json(FloatJson::parse(doc.dump()));
  CHECK(back == qm);

  auto rejects = [](FloatJson d) { CHECK_THROWS_AS(qmodel_from_json(d), DataContractError); };
  FloatJson d = doc;
  d["tensors"]["mlp.output_weights"]["data"][0][0] = 128;
  rejects(d);
  d = doc;
  d["tensors"]["mlp.output_weights"]["data"][0][0] = 1.5;
  rejects(d);
  d = doc;
  d["tensors"]["mlp.output_weights"]["rescale"] = 123.0;
  rejects(d);
  d = doc;
  d["scales"]["s_h"] = 0.3;
  rejects(d);
  d = doc;
  d["tensors"].erase("gru0.update.input_bias");
  rejects(d);
}

TEST_CASE("files and format dispatch") {
  TempDir dir;
  const GruMlpModel m = awkward_model();
  const QuantizedGruMlpModel qm = quantize_model(testing::random_model(small_arch(1), 3));
  save_model(m, dir.path / "f.json");
  save_model(m, dir.path / "d.json", FloatEncoding::kDecimal);
  save_qmodel(qm, dir.path / "q.json");

  CHECK(bitwise_equal(load_model(dir.path / "f.json"), m));
  CHECK(bitwise_equal(load_model(dir.path / "d.json"), m));
  CHECK(load_qmodel(dir.path / "q.json") == qm);
  CHECK(std::holds_alternative<QuantizedGruMlpModel>(load_any_model(dir.path / "q.json")));
  CHECK_THROWS_AS(load_model(dir.path / "q.json"), DataContractError);
  CHECK_THROWS_AS(load_qmodel(dir.path / "f.json"), DataContractError);

  write_text_file(dir.path / "junk.json", "{not json");
  CHECK_THROWS_AS(load_any_model(dir.path / "junk.json"), DataContractError);
  write_text_file(dir.path / "other.json", "{\"format\": \"onnx\"}");
  CHECK_THROWS_AS(load_any_model(dir.path / "other.json"), DataContractError);
}

#include "kdq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "kdq/errors.hpp"
#include "kdq/json_util.hpp"

namespace kdq {

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataContractError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("write failed for " + path.string());
}

void Dataset::validate() const {
  std::unordered_set<std::int64_t> seen;
  for (const auto& dp : datapoints) {
    if (!seen.insert(dp.id).second) throw DataContractError("duplicate datapoint id " + std::to_string(dp.id));
    if (dp.label >= num_classes) {
      throw DataContractError("datapoint " + std::to_string(dp.id) + " has label " + std::to_string(dp.label) +
                              " but only " + std::to_string(num_classes) + " classes");
    }
    if (dp.samples.rows != sequence_length || dp.samples.cols != input_dim) {
      throw DataContractError("datapoint " + std::to_string(dp.id) + " has shape " +
                              std::to_string(dp.samples.rows) + "x" + std::to_string(dp.samples.cols) +
                              ", dataset expects " + std::to_string(sequence_length) + "x" +
                              std::to_string(input_dim));
    }
    for (float v : dp.samples.data) {
      if (!std::isfinite(v)) throw DataContractError("datapoint " + std::to_string(dp.id) + " has non-finite samples");
    }
  }
}

const Datapoint& Dataset::by_id(std::int64_t id) const {
  // ids are usually their own positions
  if (id >= 0 && static_cast<std::size_t>(id) < datapoints.size() && datapoints[id].id == id) return datapoints[id];
  for (const auto& dp : datapoints) {
    if (dp.id == id) return dp;
  }
  throw DataContractError("unknown datapoint id " + std::to_string(id));
}

std::vector<std::int64_t> Dataset::ids() const {
  std::vector<std::int64_t> out;
  out.reserve(datapoints.size());
  for (const auto& dp : datapoints) out.push_back(dp.id);
  return out;
}

std::string dataset_line(const Datapoint& dp) {
  FloatJson j;
  j["id"] = dp.id;
  j["animal"] = dp.animal_id;
  j["label"] = dp.label;
  FloatJson samples = FloatJson::array();
  for (std::size_t t = 0; t < dp.samples.rows; ++t) {
    FloatJson row = FloatJson::array();
    for (float v : dp.samples.row(t)) row.push_back(v);
    samples.push_back(std::move(row));
  }
  j["samples"] = std::move(samples);
  return j.dump();
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::string text;
  for (const auto& dp : dataset.datapoints) {
    text += dataset_line(dp);
    text += '\n';
  }
  write_text_file(path, text);
}

Dataset load_dataset(const std::filesystem::path& path, const DatasetSchema& schema) {
  Dataset ds;
  ds.num_classes = schema.num_classes;
  ds.class_names = schema.class_names;
  std::ifstream in(path);
  if (!in) throw DataContractError("cannot open dataset " + path.string());
  std::string line;
  std::size_t lineno = 0;
  bool have_shape = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      return DataContractError(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    Datapoint dp;
    try {
      const FloatJson j = FloatJson::parse(line);
      dp.id = j.at("id").get<std::int64_t>();
      dp.animal_id = j.at("animal").get<std::string>();
      const auto label = j.at("label").get<std::int64_t>();
      if (label < 0) throw fail("negative label");
      dp.label = static_cast<std::size_t>(label);
      const auto& rows = j.at("samples");
      if (!rows.is_array() || rows.empty()) throw fail("samples must be a non-empty array");
      const std::size_t dim = rows.front().size();
      dp.samples = Window(rows.size(), dim);
      for (std::size_t t = 0; t < rows.size(); ++t) {
        if (!rows[t].is_array() || rows[t].size() != dim) throw fail("ragged samples array");
        for (std::size_t k = 0; k < dim; ++k) dp.samples(t, k) = rows[t][k].get<float>();
      }
    } catch (const DataContractError&) {
      throw;
    } catch (const std::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    }
    if (!have_shape) {
      ds.sequence_length = dp.samples.rows;
      ds.input_dim = dp.samples.cols;
      have_shape = true;
    } else if (dp.samples.rows != ds.sequence_length || dp.samples.cols != ds.input_dim) {
      throw fail("window shape differs from earlier records");
    }
    if (dp.label >= ds.num_classes) {
      throw fail("label " + std::to_string(dp.label) + " out of range for " + std::to_string(ds.num_classes) +
                 " classes");
    }
    ds.datapoints.push_back(std::move(dp));
  }
  ds.validate();
  return ds;
}

NormStats compute_norm_stats(const Dataset& dataset, std::span<const std::int64_t> ids) {
  if (ids.empty()) throw InvalidInput("compute_norm_stats: empty subset");
  std::vector<std::int64_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t D = dataset.input_dim;
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  double count = 0;
  for (auto id : sorted) {
    const Window& w = dataset.by_id(id).samples;
    for (std::size_t t = 0; t < w.rows; ++t) {
      for (std::size_t k = 0; k < D; ++k) sum[k] += w(t, k);
    }
    count += static_cast<double>(w.rows);
  }
  NormStats stats;
  stats.mean.resize(D);
  stats.inv_std.resize(D);
  for (std::size_t k = 0; k < D; ++k) stats.mean[k] = static_cast<float>(sum[k] / count);
  for (auto id : sorted) {
    const Window& w = dataset.by_id(id).samples;
    for (std::size_t t = 0; t < w.rows; ++t) {
      for (std::size_t k = 0; k < D; ++k) {
        const double d = w(t, k) - sum[k] / count;
        sq[k] += d * d;
      }
    }
  }
  for (std::size_t k = 0; k < D; ++k) {
    const double sd = std::sqrt(sq[k] / count);
    stats.inv_std[k] = static_cast<float>(1.0 / std::max(sd, kMinNormStd));
  }
  return stats;
}

std::vector<Fold> loao_splits(const Dataset& dataset) {
  std::set<std::string> animals;
  for (const auto& dp : dataset.datapoints) animals.insert(dp.animal_id);
  if (animals.size() < 2) throw InvalidInput("leave-one-animal-out needs at least two animals");
  std::vector<Fold> folds;
  for (const auto& animal : animals) {
    Fold f;
    f.animal_id = animal;
    for (const auto& dp : dataset.datapoints) {
      (dp.animal_id == animal ? f.validation_ids : f.train_ids).push_back(dp.id);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

namespace {

struct AnimalTraits {
  float gain;
  float tempo;
  float noise;
  float posture[3];
};

void add_noise(Window& w, std::mt19937_64& rng, float sigma) {
  std::normal_distribution<float> n(0.0f, sigma);
  for (auto& v : w.data) v += n(rng);
}

// Head-down posture with vigorous periodic movement, strongest on x / y.
void grazing_window(Window& w, const AnimalTraits& a, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const float two_pi = 2.0f * std::numbers::pi_v<float>;
  const float cycles = a.tempo * (2.5f + 2.5f * u(rng));
  const float amp = a.gain * (0.35f + 0.55f * u(rng));
  const float phase = two_pi * u(rng);
  const float N = static_cast<float>(w.rows);
  for (std::size_t t = 0; t < w.rows; ++t) {
    const float th = two_pi * cycles * static_cast<float>(t) / N + phase;
    w(t, 0) = a.posture[0] + 0.25f + amp * std::sin(th);
    w(t, 1) = a.posture[1] + 0.7f * amp * std::sin(th + 1.3f);
    w(t, 2) = a.posture[2] - 0.2f + 0.4f * amp * std::sin(2.0f * th);
  }
  add_noise(w, rng, 0.12f * a.noise);
}

// Low-motion posture with a slow drift.
void resting_window(Window& w, const AnimalTraits& a, std::mt19937_64& rng) {
  std::normal_distribution<float> drift(0.0f, 0.01f);
  float d[3] = {0, 0, 0};
  for (std::size_t t = 0; t < w.rows; ++t) {
    for (std::size_t k = 0; k < 3; ++k) {
      d[k] += drift(rng);
      w(t, k) = a.posture[k] + d[k];
    }
  }
  add_noise(w, rng, 0.05f * a.noise);
}

// Resting-like baseline interrupted by short bursts of motion.
void alia_window(Window& w, const AnimalTraits& a, std::mt19937_64& rng) {
  resting_window(w, a, rng);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::uniform_int_distribution<int> bursts(1, 3);
  const int nb = bursts(rng);
  const std::size_t N = w.rows;
  for (int b = 0; b < nb; ++b) {
    const std::size_t len = 3 + static_cast<std::size_t>(u(rng) * static_cast<float>(N / 6));
    const std::size_t start = static_cast<std::size_t>(u(rng) * static_cast<float>(N - std::min(len, N)));
    const float amp = a.gain * (0.15f + 0.9f * u(rng));
    const std::size_t axis = static_cast<std::size_t>(u(rng) * 3.0f) % 3;
    const float freq = 0.6f + 0.8f * u(rng);
    for (std::size_t t = start; t < std::min(N, start + len); ++t) {
      const float s = std::sin(freq * static_cast<float>(t - start) * 2.0f);
      w(t, axis) += amp * s;
      w(t, (axis + 1) % 3) += 0.5f * amp * u(rng);
    }
  }
}

}  // namespace

Dataset synth_gen(const SynthConfig& cfg) {
  if (cfg.num_animals < 1 || cfg.windows_per_animal < 1 || cfg.sequence_length < 1) {
    throw InvalidInput("synth_gen: all counts must be >= 1");
  }
  Dataset ds;
  ds.sequence_length = cfg.sequence_length;
  ds.input_dim = 3;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::int64_t next_id = 0;
  const std::size_t W = cfg.windows_per_animal;
  const std::size_t n_graze = (W + 1) / 2;
  const std::size_t n_rest = std::min(W - n_graze, static_cast<std::size_t>(std::lround(0.35 * static_cast<double>(W))));
  for (std::size_t a = 0; a < cfg.num_animals; ++a) {
    AnimalTraits traits;
    traits.gain = 0.7f + 0.6f * u(rng);
    traits.tempo = 0.8f + 0.4f * u(rng);
    traits.noise = 0.7f + 0.6f * u(rng);
    traits.posture[0] = 0.3f * (u(rng) - 0.5f);
    traits.posture[1] = 0.3f * (u(rng) - 0.5f);
    traits.posture[2] = 0.9f + 0.2f * u(rng);

    std::vector<std::size_t> labels(W, 2);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_graze), 0);
    std::fill(labels.begin() + static_cast<std::ptrdiff_t>(n_graze),
              labels.begin() + static_cast<std::ptrdiff_t>(n_graze + n_rest), 1);
    std::shuffle(labels.begin(), labels.end(), rng);

    char name[16];
    std::snprintf(name, sizeof name, "animal%02zu", a + 1);
    for (std::size_t i = 0; i < W; ++i) {
      Datapoint dp;
      dp.id = next_id++;
      dp.animal_id = name;
      dp.label = labels[i];
      dp.samples = Window(cfg.sequence_length, 3);
      switch (dp.label) {
        case 0: grazing_window(dp.samples, traits, rng); break;
        case 1: resting_window(dp.samples, traits, rng); break;
        default: alia_window(dp.samples, traits, rng); break;
      }
      ds.datapoints.push_back(std::move(dp));
    }
  }
  return ds;
}

}  // namespace kdq

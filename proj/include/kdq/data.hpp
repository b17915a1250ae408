#pragma once

// Datasets of labelled accelerometer windows, their JSONL on-disk form,
// normalization statistics, leave-one-animal-out folds and the synthetic
// stand-in generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kdq/model.hpp"
#include "kdq/tensor.hpp"

namespace kdq {

struct Datapoint {
  std::int64_t id = 0;
  std::string animal_id;
  std::size_t label = 0;
  Window samples;  // N x input_dim

  friend bool operator==(const Datapoint&, const Datapoint&) = default;
};

struct Dataset {
  std::size_t num_classes = 3;
  std::vector<std::string> class_names{"grazing", "resting", "alia"};
  std::size_t sequence_length = 0;
  std::size_t input_dim = 3;
  std::vector<Datapoint> datapoints;

  /// Checks ids, labels and shapes. Throws DataContractError.
  void validate() const;
  /// Throws DataContractError for unknown ids.
  const Datapoint& by_id(std::int64_t id) const;
  std::vector<std::int64_t> ids() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Classes are not stored in the JSONL file; the schema supplies them.
struct DatasetSchema {
  std::size_t num_classes = 3;
  std::vector<std::string> class_names{"grazing", "resting", "alia"};
};

/// One JSON object per line:
/// {"id":…,"animal":"…","label":…,"samples":[[x,y,z],…]}
Dataset load_dataset(const std::filesystem::path& path, const DatasetSchema& schema = {});
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
std::string dataset_line(const Datapoint& dp);

struct NormStats {
  Vector<float> mean;
  Vector<float> inv_std;
};

inline constexpr double kMinNormStd = 1e-6;

/// Per-axis mean and 1 / max(std, 1e-6) over every sample of the subset.
NormStats compute_norm_stats(const Dataset& dataset, std::span<const std::int64_t> ids);

struct Fold {
  std::string animal_id;
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> validation_ids;
};

/// One fold per animal, ordered by animal id.
std::vector<Fold> loao_splits(const Dataset& dataset);

struct SynthConfig {
  std::size_t num_animals = 8;
  std::size_t windows_per_animal = 50;
  std::size_t sequence_length = 64;
  std::uint64_t seed = 7;
};

/// Three-class synthetic cattle-like accelerometry (class shares 50/35/15 %).
Dataset synth_gen(const SynthConfig& cfg);

}  // namespace kdq

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>

#include "kdq/data.hpp"
#include "kdq/errors.hpp"
#include "kdq/json_util.hpp"

using namespace kdq;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "kdq_test_data";
  fs::create_directories(dir);
  return dir / name;
}

Dataset tiny() {
  SynthConfig cfg;
  cfg.num_animals = 3;
  cfg.windows_per_animal = 6;
  cfg.sequence_length = 8;
  cfg.seed = 3;
  return synth_gen(cfg);
}

}  // namespace

TEST_CASE("synthetic generator shape and class shares") {
  const Dataset ds = synth_gen({});
  CHECK(ds.datapoints.size() == 400);
  CHECK(ds.sequence_length == 64);
  CHECK(ds.input_dim == 3);
  std::map<std::string, std::array<int, 3>> per_animal;
  for (const auto& dp : ds.datapoints) per_animal[dp.animal_id][dp.label]++;
  CHECK(per_animal.size() == 8);
  for (const auto& [animal, counts] : per_animal) {
    CHECK(counts[0] == 25);
    CHECK(counts[1] == 18);
    CHECK(counts[2] == 7);
  }
  CHECK_NOTHROW(ds.validate());
  CHECK(synth_gen({}) == ds);
  SynthConfig other;
  other.seed = 8;
  CHECK_FALSE(synth_gen(other) == ds);
}

TEST_CASE("JSONL round trip is bit exact") {
  Dataset ds = tiny();
  ds.datapoints[0].samples(0, 0) = 0.1f;
  ds.datapoints[0].samples(0, 1) = std::nextafter(1.0f, 2.0f);
  ds.datapoints[0].samples(0, 2) = -3.4028235e38f;
  const fs::path p = temp_file("roundtrip.jsonl");
  save_dataset(ds, p);
  const Dataset back = load_dataset(p);
  REQUIRE(back.datapoints.size() == ds.datapoints.size());
  for (std::size_t i = 0; i < ds.datapoints.size(); ++i) {
    const auto& a = ds.datapoints[i].samples.data;
    const auto& b = back.datapoints[i].samples.data;
    REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }
  CHECK(back == ds);
  save_dataset(back, temp_file("roundtrip2.jsonl"));
  CHECK(read_text_file(p) == read_text_file(temp_file("roundtrip2.jsonl")));
}

TEST_CASE("load rejects contract violations with line numbers") {
  const Dataset ds = tiny();
  const std::string good = dataset_line(ds.datapoints[0]) + "\n" + dataset_line(ds.datapoints[1]) + "\n";
  auto expect_error = [](const std::string& text, const std::string& fragment, const DatasetSchema& schema = {}) {
    const fs::path p = temp_file("bad.jsonl");
    write_text_file(p, text);
    try {
      load_dataset(p, schema);
      FAIL("expected DataContractError");
    } catch (const DataContractError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  expect_error(good + dataset_line(ds.datapoints[0]) + "\n", "duplicate");
  Datapoint bad_label = ds.datapoints[2];
  bad_label.label = 3;
  expect_error(good + dataset_line(bad_label) + "\n", ":3:");
  Datapoint short_window = ds.datapoints[2];
  short_window.samples = Window(4, 3);
  expect_error(good + dataset_line(short_window) + "\n", ":3:");
  expect_error(good + "{\"id\": 9}\n", ":3:");
  expect_error("not json\n", ":1:");
  CHECK_THROWS_AS(load_dataset(temp_file("does_not_exist.jsonl")), DataContractError);

  DatasetSchema two;
  two.num_classes = 2;
  two.class_names = {"a", "b"};
  Datapoint label2 = ds.datapoints[2];
  label2.label = 2;
  expect_error(good + dataset_line(label2) + "\n", "out of range", two);
}

TEST_CASE("normalization statistics") {
  Dataset ds;
  ds.sequence_length = 2;
  ds.input_dim = 3;
  Datapoint a{0, "x", 0, Window(2, 3)};
  Datapoint b{1, "y", 1, Window(2, 3)};
  // axis 0: {1, 3, 5, 7}; axis 1 constant; axis 2: {0, 0, 0, 4}
  a.samples.data = {1, 2, 0, 3, 2, 0};
  b.samples.data = {5, 2, 0, 7, 2, 4};
  ds.datapoints = {a, b};
  const std::vector<std::int64_t> ids{1, 0};
  const NormStats s = compute_norm_stats(ds, ids);
  CHECK(s.mean[0] == 4.0f);
  CHECK(s.inv_std[0] == doctest::Approx(1.0 / std::sqrt(5.0)));
  CHECK(s.mean[1] == 2.0f);
  CHECK(s.inv_std[1] == doctest::Approx(1e6));
  CHECK(s.mean[2] == 1.0f);
  CHECK(s.inv_std[2] == doctest::Approx(1.0 / std::sqrt(3.0)));
  // subset only
  const std::vector<std::int64_t> only_a{0};
  CHECK(compute_norm_stats(ds, only_a).mean[0] == 2.0f);
  CHECK_THROWS_AS(compute_norm_stats(ds, std::vector<std::int64_t>{}), InvalidInput);
  CHECK_THROWS_AS(compute_norm_stats(ds, std::vector<std::int64_t>{7}), DataContractError);
}

TEST_CASE("leave-one-animal-out folds partition the data") {
  const Dataset ds = synth_gen({});
  const auto folds = loao_splits(ds);
  REQUIRE(folds.size() == 8);
  std::multiset<std::int64_t> all_val;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (f > 0) CHECK(folds[f - 1].animal_id < folds[f].animal_id);
    CHECK(folds[f].validation_ids.size() == 50);
    CHECK(folds[f].train_ids.size() == 350);
    for (auto id : folds[f].validation_ids) {
      CHECK(ds.by_id(id).animal_id == folds[f].animal_id);
      all_val.insert(id);
    }
    for (auto id : folds[f].train_ids) CHECK(ds.by_id(id).animal_id != folds[f].animal_id);
  }
  CHECK(all_val.size() == 400);
  CHECK(std::set<std::int64_t>(all_val.begin(), all_val.end()).size() == 400);

  Dataset single = tiny();
  for (auto& dp : single.datapoints) dp.animal_id = "solo";
  CHECK_THROWS_AS(loao_splits(single), InvalidInput);
}

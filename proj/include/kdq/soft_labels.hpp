#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kdq/tensor.hpp"

namespace kdq {

/// Raw (pre-softmax) teacher logits keyed by datapoint id. Temperature is
/// applied at training time, so one file serves every t.
struct SoftLabelSet {
  std::size_t num_classes = 0;
  std::map<std::int64_t, Vector<float>> records;
  std::string provenance;

  /// Nullptr when the id has no record.
  const Vector<float>* find(std::int64_t id) const {
    auto it = records.find(id);
    return it == records.end() ? nullptr : &it->second;
  }
  /// Ids of `wanted` without a record, in input order.
  std::vector<std::int64_t> missing(const std::vector<std::int64_t>& wanted) const;
  /// Lengths and finiteness. Throws DataContractError.
  void validate() const;

  friend bool operator==(const SoftLabelSet&, const SoftLabelSet&) = default;
};

/// CSV with header `id,logit_0,...,logit_{C-1}`; values are written as the
/// shortest decimal that parses back to the same float.
void save_soft_labels(const SoftLabelSet& labels, const std::filesystem::path& path);
SoftLabelSet load_soft_labels(const std::filesystem::path& path);

}  // namespace kdq

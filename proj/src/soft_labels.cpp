#include "kdq/soft_labels.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <system_error>

#include "kdq/errors.hpp"
#include "kdq/json_util.hpp"

namespace kdq {

std::vector<std::int64_t> SoftLabelSet::missing(const std::vector<std::int64_t>& wanted) const {
  std::vector<std::int64_t> out;
  for (auto id : wanted) {
    if (!records.contains(id)) out.push_back(id);
  }
  return out;
}

void SoftLabelSet::validate() const {
  if (num_classes < 1) throw DataContractError("soft labels: class count must be >= 1");
  for (const auto& [id, logits] : records) {
    if (logits.size() != num_classes) {
      throw DataContractError("soft labels: record " + std::to_string(id) + " has " +
                              std::to_string(logits.size()) + " logits, expected " + std::to_string(num_classes));
    }
    for (float v : logits) {
      if (!std::isfinite(v)) throw DataContractError("soft labels: record " + std::to_string(id) + " is not finite");
    }
  }
}

void save_soft_labels(const SoftLabelSet& labels, const std::filesystem::path& path) {
  labels.validate();
  std::string text = "id";
  for (std::size_t c = 0; c < labels.num_classes; ++c) text += ",logit_" + std::to_string(c);
  text += '\n';
  char buf[64];
  for (const auto& [id, logits] : labels.records) {
    text += std::to_string(id);
    for (float v : logits) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
      text += ',';
      text.append(buf, end);
    }
    text += '\n';
  }
  write_text_file(path, text);
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

SoftLabelSet load_soft_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataContractError("cannot open soft labels " + path.string());
  SoftLabelSet out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    return DataContractError(path.string() + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (lineno == 1) {
      if (cells.size() < 2 || cells[0] != "id") throw fail("expected header id,logit_0,...");
      for (std::size_t c = 1; c < cells.size(); ++c) {
        if (cells[c] != "logit_" + std::to_string(c - 1)) throw fail("unexpected header column '" + std::string(cells[c]) + "'");
      }
      out.num_classes = cells.size() - 1;
      continue;
    }
    if (cells.size() != out.num_classes + 1) throw fail("wrong number of columns");
    std::int64_t id = 0;
    {
      auto [ptr, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), id);
      if (ec != std::errc{} || ptr != cells[0].data() + cells[0].size()) throw fail("bad id");
    }
    Vector<float> logits(out.num_classes);
    for (std::size_t c = 0; c < out.num_classes; ++c) {
      const auto cell = cells[c + 1];
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), logits[c]);
      if (ec != std::errc{} || ptr != cell.data() + cell.size()) throw fail("bad logit '" + std::string(cell) + "'");
    }
    if (!out.records.emplace(id, std::move(logits)).second) throw fail("duplicate id " + std::to_string(id));
  }
  if (lineno == 0) throw DataContractError(path.string() + ": empty soft-label file");
  out.validate();
  return out;
}

}  // namespace kdq

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace kdq {

/// JSON document whose floating-point type is float: parsing goes through
/// strtof and dumping emits the shortest decimal that round-trips a float,
/// so FP32 values survive a text round trip bit-exactly.
using FloatJson = nlohmann::basic_json<nlohmann::ordered_map, std::vector, std::string, bool, std::int64_t,
                                       std::uint64_t, float>;

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace kdq

#pragma once

// JSON documents for float and quantized models.
//
// Float model tensors are stored either as base64 of little-endian IEEE-754
// bytes (the canonical form) or as decimal nested arrays. Decimal values are
// written as the shortest text that parses back to the same float, so both
// encodings round-trip bit-exactly.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kdq/json_util.hpp"
#include "kdq/model.hpp"
#include "kdq/qmodel.hpp"

namespace kdq {

inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kFloatModelFormat = "kdq-model";
inline constexpr const char* kQuantModelFormat = "kdq-qmodel";

enum class FloatEncoding { kBase64, kDecimal };

FloatJson model_to_json(const GruMlpModel& model, FloatEncoding encoding = FloatEncoding::kBase64);
GruMlpModel model_from_json(const FloatJson& doc);

FloatJson qmodel_to_json(const QuantizedGruMlpModel& qmodel);
QuantizedGruMlpModel qmodel_from_json(const FloatJson& doc);

FloatJson arch_to_json(const Architecture& arch);
Architecture arch_from_json(const FloatJson& j);

void save_model(const GruMlpModel& model, const std::filesystem::path& path,
                FloatEncoding encoding = FloatEncoding::kBase64);
void save_qmodel(const QuantizedGruMlpModel& qmodel, const std::filesystem::path& path);

using AnyModel = std::variant<GruMlpModel, QuantizedGruMlpModel>;

/// Reads either document kind, dispatching on its "format" field. Throws
/// DataContractError on malformed or inconsistent files.
AnyModel load_any_model(const std::filesystem::path& path);
GruMlpModel load_model(const std::filesystem::path& path);
QuantizedGruMlpModel load_qmodel(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace kdq

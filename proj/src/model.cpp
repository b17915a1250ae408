#include "kdq/model.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

#include "kdq/op_count.hpp"

namespace kdq {

void Architecture::validate() const {
  if (num_gru_layers < 1 || num_gru_layers > 2) throw InvalidInput("architecture: 1 or 2 GRU layers supported");
  if (hidden_size < 1 || num_classes < 1 || input_dim < 1 || sequence_length < 1) {
    throw InvalidInput("architecture: all dimensions must be >= 1");
  }
}

std::string Architecture::name() const {
  return "gru(" + std::to_string(num_gru_layers) + "," + std::to_string(hidden_size) + ")";
}

Architecture parse_architecture(std::string_view text, const Architecture& base) {
  std::string s;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(static_cast<char>(std::tolower(c)));
  }
  // accept an optional "-mlp" suffix, as in "GRU(1,32)-MLP"
  if (s.size() > 4 && s.ends_with("-mlp")) s.resize(s.size() - 4);
  auto bad = [&] { return InvalidInput("cannot parse architecture '" + std::string(text) + "', expected gru(layers,hidden)"); };
  if (!s.starts_with("gru(") || !s.ends_with(")")) throw bad();
  const std::string_view body(s.data() + 4, s.size() - 5);
  const auto comma = body.find(',');
  if (comma == std::string_view::npos) throw bad();
  auto parse_count = [&](std::string_view v) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size() || v.empty()) throw bad();
    return out;
  };
  Architecture a = base;
  a.num_gru_layers = parse_count(body.substr(0, comma));
  a.hidden_size = parse_count(body.substr(comma + 1));
  a.validate();
  return a;
}

std::size_t count_params(const Architecture& a) {
  const std::size_t L = a.hidden_size;
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) n += 3 * (L * a.layer_input(l) + L * L + 2 * L);
  const std::size_t H = a.mlp_hidden();
  n += H * L + H + a.num_classes * H + a.num_classes;
  n += 2 * a.input_dim;
  return n;
}

std::size_t count_mults(const Architecture& a) {
  const std::size_t L = a.hidden_size;
  // normalization, then per layer: six MVMs and three element-wise products
  std::size_t per_step = a.input_dim;
  for (std::size_t l = 0; l < a.num_gru_layers; ++l) per_step += 3 * (L * a.layer_input(l) + L * L) + 3 * L;
  const std::size_t H = a.mlp_hidden();
  return a.sequence_length * per_step + H * L + a.num_classes * H;
}

std::size_t predict(const Window& window, const GruMlpModel& model, ActivationMode mode) {
  const Vector<float> logits = forward<float>(window, model, mode);
  return argmax<float>(logits);
}

OpTally measured_forward_ops(const Window& window, const GruMlpModel& model) {
  using C = Counted<float>;
  const BasicGruMlp<C> counted = model.cast<C>();
  const Matrix<C> w = window.cast<C>();
  TallyScope scope;
  (void)forward<C>(w, counted, ActivationMode::kExact);
  return scope.delta();
}

}  // namespace kdq

#include "kkl/dynamics/signal.hpp"

#include <cmath>
#include <numbers>

#include "kkl/error.hpp"

namespace kkl {

std::string_view kind_name(InputKind kind) {
  switch (kind) {
    case InputKind::Zero: return "zero";
    case InputKind::Constant: return "constant";
    case InputKind::Sinusoid: return "sinusoid";
    case InputKind::Square: return "square";
  }
  return "?";
}

InputKind parse_kind(std::string_view name) {
  for (auto k : all_kinds())
    if (kind_name(k) == name) return k;
  throw ConfigError("unknown input kind '" + std::string(name) + "'");
}

std::vector<InputKind> all_kinds() {
  return {InputKind::Zero, InputKind::Constant, InputKind::Sinusoid, InputKind::Square};
}

double InputSignal::operator()(double t) const {
  switch (kind) {
    case InputKind::Zero: return 0.0;
    case InputKind::Constant: return offset;
    case InputKind::Sinusoid: return offset + amplitude * std::sin(frequency * t + phase);
    case InputKind::Square:
      return std::sin(frequency * t + phase) >= 0.0 ? offset + amplitude : offset - amplitude;
  }
  return 0.0;
}

InputSignal sample_input(InputKind kind, Rng& rng) {
  InputSignal s;
  s.kind = kind;
  switch (kind) {
    case InputKind::Zero: break;
    case InputKind::Constant: s.offset = rng.uniform(-1.0, 1.0); break;
    case InputKind::Sinusoid:
    case InputKind::Square:
      s.amplitude = rng.uniform(0.2, 1.0);
      s.frequency = rng.uniform(0.2, 2.0);
      s.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      break;
  }
  return s;
}

}  // namespace kkl

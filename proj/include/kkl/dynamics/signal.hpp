#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "kkl/diffcore/rng.hpp"

namespace kkl {

enum class InputKind { Zero, Constant, Sinusoid, Square };

std::string_view kind_name(InputKind kind);
InputKind parse_kind(std::string_view name);
std::vector<InputKind> all_kinds();

/// Scalar exogenous input u(t).
struct InputSignal {
  InputKind kind = InputKind::Zero;
  double amplitude = 0.0;
  double frequency = 0.0;  // rad/s
  double phase = 0.0;
  double offset = 0.0;

  double operator()(double t) const;
};

/// Draws signal parameters: constant offset ~ U[-1,1]; sinusoid/square
/// amplitude ~ U[0.2,1], frequency ~ U[0.2,2] rad/s, phase ~ U[0,2pi).
InputSignal sample_input(InputKind kind, Rng& rng);

}  // namespace kkl

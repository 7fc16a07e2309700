#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "kkl/diffcore/tensor.hpp"

namespace kkl {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Controlled system x' = f(x, u), y = h(x).
struct SystemSpec {
  std::string name;
  std::size_t n_x = 0;
  std::size_t n_u = 1;
  std::size_t n_y = 1;
  std::function<Vector(const Vector& x, const Vector& u)> drift;
  std::function<Vector(const Vector& x)> output;
  std::vector<Interval> ic_box;
  /// Hidden width of the base encoder/decoder MLPs.
  std::size_t hidden = 150;

  /// Checked wrappers around drift/output.
  Vector f(const Vector& x, const Vector& u) const;
  Vector h(const Vector& x) const;
};

SystemSpec duffing();
SystemSpec van_der_pol();
SystemSpec rossler();
SystemSpec fitzhugh_nagumo();
/// x' = -x + u, y = x. Used for pipeline sanity checks.
SystemSpec linear_decay();

/// "duffing", "vdp", "rossler", "fhn", "linear". Throws ConfigError otherwise.
SystemSpec system_by_name(const std::string& name);
std::vector<std::string> benchmark_system_names();

}  // namespace kkl

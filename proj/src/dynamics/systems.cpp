#include "kkl/dynamics/systems.hpp"

#include "kkl/error.hpp"

namespace kkl {

Vector SystemSpec::f(const Vector& x, const Vector& u) const {
  if (static_cast<std::size_t>(x.size()) != n_x || static_cast<std::size_t>(u.size()) != n_u) {
    throw ShapeError(name + ": drift expects x in R^" + std::to_string(n_x) + ", u in R^" +
                     std::to_string(n_u) + ", got " + std::to_string(x.size()) + ", " +
                     std::to_string(u.size()));
  }
  return drift(x, u);
}

Vector SystemSpec::h(const Vector& x) const {
  if (static_cast<std::size_t>(x.size()) != n_x) {
    throw ShapeError(name + ": output expects x in R^" + std::to_string(n_x) + ", got " +
                     std::to_string(x.size()));
  }
  return output(x);
}

SystemSpec duffing() {
  SystemSpec s;
  s.name = "duffing";
  s.n_x = 2;
  s.drift = [](const Vector& x, const Vector& u) {
    Vector d(2);
    d << x(1), -x(0) - x(0) * x(0) * x(0) + u(0);
    return d;
  };
  s.output = [](const Vector& x) { return Vector::Constant(1, x(0)); };
  s.ic_box = {{-1, 1}, {-1, 1}};
  return s;
}

SystemSpec van_der_pol() {
  SystemSpec s;
  s.name = "vdp";
  s.n_x = 2;
  s.drift = [](const Vector& x, const Vector& u) {
    Vector d(2);
    d << x(1), (1.0 - x(0) * x(0)) * x(1) - x(0) + u(0);
    return d;
  };
  s.output = [](const Vector& x) { return Vector::Constant(1, x(0)); };
  s.ic_box = {{-1, 1}, {-1, 1}};
  return s;
}

SystemSpec rossler() {
  SystemSpec s;
  s.name = "rossler";
  s.n_x = 3;
  s.drift = [](const Vector& x, const Vector& u) {
    Vector d(3);
    d << -(x(1) + x(2)), x(0) + 0.1 * x(1) + u(0), 0.1 + x(2) * (x(0) - 14.0);
    return d;
  };
  s.output = [](const Vector& x) { return Vector::Constant(1, x(1)); };
  s.ic_box = {{-5, 5}, {-5, 5}, {0, 2}};
  s.hidden = 350;
  return s;
}

SystemSpec fitzhugh_nagumo() {
  SystemSpec s;
  s.name = "fhn";
  s.n_x = 2;
  s.drift = [](const Vector& x, const Vector& u) {
    Vector d(2);
    d << 10.0 * (x(0) - x(0) * x(0) * x(0) - x(1)) + u(0), 1.5 * x(0) - x(1) + 0.8;
    return d;
  };
  s.output = [](const Vector& x) { return Vector::Constant(1, x(0)); };
  s.ic_box = {{-1, 1}, {-1, 1}};
  s.hidden = 350;
  return s;
}

SystemSpec linear_decay() {
  SystemSpec s;
  s.name = "linear";
  s.n_x = 1;
  s.drift = [](const Vector& x, const Vector& u) { return Vector::Constant(1, -x(0) + u(0)); };
  s.output = [](const Vector& x) { return Vector::Constant(1, x(0)); };
  s.ic_box = {{-1, 1}};
  s.hidden = 16;
  return s;
}

SystemSpec system_by_name(const std::string& name) {
  if (name == "duffing") return duffing();
  if (name == "vdp") return van_der_pol();
  if (name == "rossler") return rossler();
  if (name == "fhn") return fitzhugh_nagumo();
  if (name == "linear") return linear_decay();
  throw ConfigError("unknown system '" + name + "'");
}

std::vector<std::string> benchmark_system_names() { return {"duffing", "vdp", "rossler", "fhn"}; }

}  // namespace kkl

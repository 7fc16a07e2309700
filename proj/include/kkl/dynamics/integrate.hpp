#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "kkl/diffcore/rng.hpp"
#include "kkl/diffcore/tensor.hpp"
#include "kkl/dynamics/signal.hpp"
#include "kkl/dynamics/systems.hpp"

namespace kkl {

using Rhs = std::function<Vector(double t, const Vector& x)>;

struct AdaptiveOptions {
  double rtol = 1e-8;
  double atol = 1e-8;
  std::size_t max_steps = 5'000'000;
};

/// Dormand-Prince 5(4) stepper with FSAL and 4th-order dense output.
class Dopri5 {
 public:
  Dopri5(Rhs rhs, double t0, Vector x0, AdaptiveOptions opts = {});

  /// Advances to exactly t_end. Each sample time in (t, t_end] is filled by
  /// dense output into the matching row of `out`, starting at `row`.
  void advance_to(double t_end, std::span<const double> samples = {}, Matrix* out = nullptr,
                  std::size_t row = 0);
  /// Call after the right-hand side changed discontinuously at the current time.
  void restart();

  double time() const { return t_; }
  const Vector& state() const { return x_; }
  std::size_t steps() const { return accepted_; }
  std::size_t rejected() const { return rejected_; }

 private:
  double initial_step() const;

  Rhs rhs_;
  AdaptiveOptions opts_;
  double t_;
  Vector x_;
  Vector k1_;
  double h_ = 0.0;
  std::size_t accepted_ = 0;
  std::size_t rejected_ = 0;
};

/// Solution sampled at the ascending `times` (times[0] is the initial time).
Matrix solve_rk45(const Rhs& rhs, const Vector& x0, std::span<const double> times,
                  AdaptiveOptions opts = {});
/// Classic fixed-step RK4 taking one step between consecutive sample times.
Matrix solve_rk4(const Rhs& rhs, const Vector& x0, std::span<const double> times);

/// One RK4 step of size h.
Vector rk4_step(const Rhs& rhs, double t, const Vector& x, double h);

/// Uniform-grid trajectory; row k of each matrix is sample t_k = k dt.
struct Trajectory {
  std::vector<double> times;
  Matrix states;
  Matrix inputs;
  Matrix outputs;

  std::size_t steps() const { return times.empty() ? 0 : times.size() - 1; }
  double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

enum class Method { Rk45, Rk4 };

std::vector<double> uniform_grid(double T, double dt);

/// Integrates spec from x0 under `signal` on [0, T] and samples states,
/// inputs and outputs on the grid. `process_noise` (rows = steps, cols = n_x)
/// is added to the drift as a constant on each grid interval.
Trajectory integrate(const SystemSpec& spec, const Vector& x0, const InputSignal& signal, double T,
                     double dt, Method method = Method::Rk45, const Matrix* process_noise = nullptr,
                     AdaptiveOptions opts = {});

/// Draws process noise rows w_k ~ N(0, sigma2 I) for `steps` intervals.
Matrix draw_process_noise(std::size_t steps, std::size_t n_x, double sigma2, Rng& rng);

/// y_k <- y_k + v_k with v_k ~ N(0, sigma2 I) i.i.d.
Trajectory add_noise(const Trajectory& traj, double sigma2, Rng& rng);

/// Columnar CSV: t, x1.., u1.., y1..
void write_csv(std::ostream& os, const Trajectory& traj);

}  // namespace kkl

#include "kkl/dynamics/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "kkl/error.hpp"

namespace kkl {

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
// Dense output (Hairer & Wanner, DOPRI5 contd5).
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

constexpr double kEscape = 1e8;

void check_state(const Vector& x, double t) {
  if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kEscape) {
    throw NumericalError("state escaped at t = " + std::to_string(t));
  }
}

double rms(const Vector& v) { return std::sqrt(v.squaredNorm() / static_cast<double>(v.size())); }

}  // namespace

Dopri5::Dopri5(Rhs rhs, double t0, Vector x0, AdaptiveOptions opts)
    : rhs_(std::move(rhs)), opts_(opts), t_(t0), x_(std::move(x0)) {
  check_state(x_, t_);
  restart();
}

void Dopri5::restart() {
  k1_ = rhs_(t_, x_);
  check_state(k1_, t_);
  if (h_ == 0.0) h_ = initial_step();
}

double Dopri5::initial_step() const {
  const Vector scale = (opts_.atol + opts_.rtol * x_.cwiseAbs().array()).matrix();
  const double d0 = rms(x_.cwiseQuotient(scale));
  const double d1n = rms(k1_.cwiseQuotient(scale));
  const double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
  const Vector x1 = x_ + h0 * k1_;
  const Vector f1 = rhs_(t_ + h0, x1);
  const double d2 = rms((f1 - k1_).cwiseQuotient(scale)) / h0;
  const double m = std::max(d1n, d2);
  const double h1 = m <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / m, 1.0 / 5.0);
  return std::min(100.0 * h0, h1);
}

void Dopri5::advance_to(double t_end, std::span<const double> samples, Matrix* out,
                        std::size_t row) {
  std::size_t next = 0;
  while (next < samples.size() && samples[next] <= t_) ++next;
  while (t_ < t_end) {
    if (accepted_ + rejected_ >= opts_.max_steps) throw NumericalError("rk45: step budget exhausted");
    bool last = false;
    double h = h_;
    if (t_ + h >= t_end || t_end - (t_ + h) < 1e-12 * std::max(1.0, std::abs(t_end))) {
      h = t_end - t_;
      last = true;
    }
    if (h < 1e-14 * std::max(1.0, std::abs(t_))) {
      throw NumericalError("rk45: step size underflow at t = " + std::to_string(t_));
    }
    const Vector& k1 = k1_;
    const Vector k2 = rhs_(t_ + c2 * h, x_ + h * (a21 * k1));
    const Vector k3 = rhs_(t_ + c3 * h, x_ + h * (a31 * k1 + a32 * k2));
    const Vector k4 = rhs_(t_ + c4 * h, x_ + h * (a41 * k1 + a42 * k2 + a43 * k3));
    const Vector k5 = rhs_(t_ + c5 * h, x_ + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const Vector k6 =
        rhs_(t_ + h, x_ + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    const Vector x5 = x_ + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    const Vector k7 = rhs_(t_ + h, x5);
    const Vector err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const Vector scale =
        (opts_.atol + opts_.rtol * x_.cwiseAbs().cwiseMax(x5.cwiseAbs()).array()).matrix();
    const double en = err.allFinite() && x5.allFinite() ? rms(err.cwiseQuotient(scale))
                                                        : std::numeric_limits<double>::infinity();

    if (en <= 1.0) {
      const double t_new = last ? t_end : t_ + h;
      if (out != nullptr) {
        const Vector ydiff = x5 - x_;
        const Vector bspl = h * k1 - ydiff;
        const Vector r4 = ydiff - h * k7 - bspl;
        const Vector r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
        while (next < samples.size() && samples[next] <= t_new) {
          if (samples[next] == t_new) {
            out->row(static_cast<Eigen::Index>(row + next)) = x5.transpose();
          } else {
            const double th = (samples[next] - t_) / h;
            const double th1 = 1.0 - th;
            out->row(static_cast<Eigen::Index>(row + next)) =
                (x_ + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)))).transpose();
          }
          ++next;
        }
      }
      t_ = t_new;
      x_ = x5;
      k1_ = k7;
      check_state(x_, t_);
      ++accepted_;
      const double fac = en == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 10.0);
      if (!last || fac < 1.0) h_ = h * fac;
    } else {
      ++rejected_;
      const double fac = std::isfinite(en) ? std::clamp(0.9 * std::pow(en, -0.2), 0.2, 1.0) : 0.2;
      h_ = h * fac;
    }
  }
}

Matrix solve_rk45(const Rhs& rhs, const Vector& x0, std::span<const double> times,
                  AdaptiveOptions opts) {
  Matrix out(times.size(), x0.size());
  if (times.empty()) return out;
  out.row(0) = x0.transpose();
  Dopri5 solver(rhs, times.front(), x0, opts);
  solver.advance_to(times.back(), times, &out, 0);
  return out;
}

Vector rk4_step(const Rhs& rhs, double t, const Vector& x, double h) {
  const Vector k1 = rhs(t, x);
  const Vector k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1);
  const Vector k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2);
  const Vector k4 = rhs(t + h, x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Matrix solve_rk4(const Rhs& rhs, const Vector& x0, std::span<const double> times) {
  Matrix out(times.size(), x0.size());
  if (times.empty()) return out;
  Vector x = x0;
  out.row(0) = x.transpose();
  for (std::size_t k = 1; k < times.size(); ++k) {
    x = rk4_step(rhs, times[k - 1], x, times[k] - times[k - 1]);
    check_state(x, times[k]);
    out.row(static_cast<Eigen::Index>(k)) = x.transpose();
  }
  return out;
}

std::vector<double> uniform_grid(double T, double dt) {
  if (!(T > 0.0) || !(dt > 0.0)) throw ConfigError("T and dt must be positive");
  const double n = T / dt;
  const double steps = std::round(n);
  if (std::abs(n - steps) > 1e-9 * std::max(1.0, n)) throw ConfigError("T / dt must be integral");
  std::vector<double> times(static_cast<std::size_t>(steps) + 1);
  for (std::size_t k = 0; k < times.size(); ++k) times[k] = static_cast<double>(k) * dt;
  return times;
}

Trajectory integrate(const SystemSpec& spec, const Vector& x0, const InputSignal& signal, double T,
                     double dt, Method method, const Matrix* process_noise, AdaptiveOptions opts) {
  if (static_cast<std::size_t>(x0.size()) != spec.n_x) {
    throw ShapeError(spec.name + ": initial state has dimension " + std::to_string(x0.size()));
  }
  Trajectory tr;
  tr.times = uniform_grid(T, dt);
  const std::size_t steps = tr.steps();
  if (process_noise != nullptr &&
      (static_cast<std::size_t>(process_noise->rows()) != steps ||
       static_cast<std::size_t>(process_noise->cols()) != spec.n_x)) {
    throw ShapeError("process noise must be steps x n_x");
  }

  std::size_t interval = 0;
  auto rhs = [&](double t, const Vector& x) {
    Vector d = spec.drift(x, Vector::Constant(1, signal(t)));
    if (process_noise != nullptr) d += process_noise->row(static_cast<Eigen::Index>(interval)).transpose();
    return d;
  };

  if (method == Method::Rk4) {
    tr.states.resize(static_cast<Eigen::Index>(steps + 1), static_cast<Eigen::Index>(spec.n_x));
    Vector x = x0;
    tr.states.row(0) = x.transpose();
    for (std::size_t k = 0; k < steps; ++k) {
      interval = k;
      x = rk4_step(rhs, tr.times[k], x, dt);
      check_state(x, tr.times[k + 1]);
      tr.states.row(static_cast<Eigen::Index>(k + 1)) = x.transpose();
    }
  } else if (process_noise == nullptr) {
    tr.states = solve_rk45(rhs, x0, tr.times, opts);
  } else {
    // The drift jumps at every grid point, so integrate interval by interval.
    tr.states.resize(static_cast<Eigen::Index>(steps + 1), static_cast<Eigen::Index>(spec.n_x));
    tr.states.row(0) = x0.transpose();
    Dopri5 solver(rhs, 0.0, x0, opts);
    for (std::size_t k = 0; k < steps; ++k) {
      interval = k;
      if (k > 0) solver.restart();
      solver.advance_to(tr.times[k + 1]);
      tr.states.row(static_cast<Eigen::Index>(k + 1)) = solver.state().transpose();
    }
  }

  tr.inputs.resize(static_cast<Eigen::Index>(steps + 1), 1);
  tr.outputs.resize(static_cast<Eigen::Index>(steps + 1), static_cast<Eigen::Index>(spec.n_y));
  for (std::size_t k = 0; k <= steps; ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    tr.inputs(r, 0) = signal(tr.times[k]);
    tr.outputs.row(r) = spec.output(tr.states.row(r).transpose()).transpose();
  }
  return tr;
}

Matrix draw_process_noise(std::size_t steps, std::size_t n_x, double sigma2, Rng& rng) {
  if (sigma2 < 0.0) throw ConfigError("noise variance must be non-negative");
  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(n_x));
  if (sigma2 == 0.0) return w;
  const double sd = std::sqrt(sigma2);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * rng.normal();
  return w;
}

Trajectory add_noise(const Trajectory& traj, double sigma2, Rng& rng) {
  if (sigma2 < 0.0) throw ConfigError("noise variance must be non-negative");
  Trajectory out = traj;
  if (sigma2 == 0.0) return out;
  const double sd = std::sqrt(sigma2);
  for (Eigen::Index i = 0; i < out.outputs.size(); ++i) out.outputs.data()[i] += sd * rng.normal();
  return out;
}

void write_csv(std::ostream& os, const Trajectory& traj) {
  os << "t";
  for (Eigen::Index j = 0; j < traj.states.cols(); ++j) os << ",x" << j + 1;
  for (Eigen::Index j = 0; j < traj.inputs.cols(); ++j) os << ",u" << j + 1;
  for (Eigen::Index j = 0; j < traj.outputs.cols(); ++j) os << ",y" << j + 1;
  os << '\n';
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    os << traj.times[k];
    for (Eigen::Index j = 0; j < traj.states.cols(); ++j) os << ',' << traj.states(r, j);
    for (Eigen::Index j = 0; j < traj.inputs.cols(); ++j) os << ',' << traj.inputs(r, j);
    for (Eigen::Index j = 0; j < traj.outputs.cols(); ++j) os << ',' << traj.outputs(r, j);
    os << '\n';
  }
  os.precision(old);
}

}  // namespace kkl

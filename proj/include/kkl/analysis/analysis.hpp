#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kkl/dynamics/integrate.hpp"
#include "kkl/dynamics/signal.hpp"
#include "kkl/dynamics/systems.hpp"
#include "kkl/observer/observer.hpp"

namespace kkl {

constexpr double kSmapeEps = 1e-8;
constexpr double kSmapeCap = 200.0;

/// 100 * mean over rows with t >= t_skip and all columns of
/// 2|a - b| / max(|a| + |b|, eps). Symmetric in (a, b); 0/0 counts as 0.
double smape(const Matrix& truth, const Matrix& estimate, std::span<const double> times, double t_skip);
/// Same over every row.
double smape(const Matrix& truth, const Matrix& estimate);

struct BoundConstants {
  double kappa = 1.0;
  double lambda = 1.0;
  double eps_pde = 0.0;
  double eps_rt = 0.0;
  double ell_dec = 0.0;
  double ell_enc = 0.0;
  double B_norm = 0.0;
  double w_bar = 0.0;
  double v_bar = 0.0;
};

/// Certificate at time t for initial latent error norm xi_z0, with the
/// encoder/decoder errors replaced by the round-trip sup in the decoder slot.
double worst_case_bound(const BoundConstants& c, double xi_z0, double t);
/// t -> infinity limit of worst_case_bound.
double asymptotic_bound(const BoundConstants& c);
/// Asymptotic bound with process (w_bar) and measurement (v_bar) noise terms.
double noisy_bound(const BoundConstants& c);

/// Largest singular value of each row-block Jacobian by power iteration on J^T J.
double power_iteration_norm(const Matrix& J, std::size_t iterations = 30);

/// Points where the constants are evaluated. `inputs` are constant input
/// values; windows are filled with the value. `latent` adds decoder-only points.
struct ConstantGrid {
  Matrix states;               // [N, n_x]
  std::vector<double> inputs;  // scalar input values
  Matrix latent;               // [M, n_z], may be empty
};

/// Regular lattice with `per_axis` points per axis over the system's box.
Matrix lattice(const SystemSpec& spec, std::size_t per_axis);
/// n values evenly spaced on [-1, 1] (n = 1 gives {0}).
std::vector<double> input_levels(std::size_t n);

/// eps_pde, eps_rt, ell_dec, ell_enc from the grid; kappa, lambda from the
/// matrices. For the obs variant the residual includes the injection term.
BoundConstants estimate_constants(const ModelBundle& bundle, const SystemSpec& spec, const ConstantGrid& grid,
                                  double w_bar = 0.0, double v_bar = 0.0);

/// Per-trajectory outcome of comparing ||x - x_hat|| with the certificate.
struct BoundCheck {
  std::vector<bool> holds;
  std::vector<double> worst_ratio;  // max_k error / bound over t_k >= t_skip
  double fraction() const;
};

BoundCheck check_bound(const ModelBundle& bundle, const BoundConstants& c, std::span<const Trajectory> truth,
                       std::span<const EstimateTrace> estimates, double t_skip);

struct BenchmarkConfig {
  std::size_t n_trials = 100;
  double sigma2 = 0.01;
  double t_skip = 5.0;
  double horizon = 50.0;
  double dt = 0.05;
  std::vector<InputKind> regimes = all_kinds();
  std::uint64_t seed = 0;
};

/// Per-trial test trajectories for one regime. Trial i draws its initial
/// condition, input and noise from a stream keyed on (seed, regime, i).
struct TestSet {
  std::vector<Trajectory> truth;
  std::vector<Trajectory> measured;
};

TestSet make_test_set(const SystemSpec& spec, InputKind regime, const BenchmarkConfig& cfg, bool noisy = true);

struct SmapeReport {
  std::string system;
  std::uint64_t seed = 0;
  double t_skip = 0.0;
  std::size_t n_trials = 0;
  std::vector<Variant> variants;
  std::vector<InputKind> regimes;
  /// trials[variant][regime] -> per-trial SMAPE (percent)
  std::map<Variant, std::map<InputKind, std::vector<double>>> trials;
  std::map<Variant, std::map<InputKind, std::size_t>> diverged;

  double mean(Variant v, InputKind r) const;
};

/// Runs every variant on every regime; divergent trials count as kSmapeCap.
SmapeReport run_benchmark(const std::vector<ModelBundle>& bundles, const SystemSpec& spec,
                          const BenchmarkConfig& cfg);

/// Rows are variants, columns are system/regime cells. `preamble` lines are
/// written first, each prefixed with '#'.
void write_table_csv(std::ostream& os, std::span<const SmapeReport> reports,
                     const std::vector<std::string>& preamble = {});

/// Table values plus per-trial arrays.
std::string report_json(const SmapeReport& report);

/// Mean ||residual|| of the bundle's map over the states and inputs of a grid.
double mean_pde_residual(const ModelBundle& bundle, const SystemSpec& spec, const ConstantGrid& grid);

}  // namespace kkl

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kkl/diffcore/graph.hpp"
#include "kkl/diffcore/tensor.hpp"
#include "kkl/dynamics/integrate.hpp"
#include "kkl/dynamics/systems.hpp"
#include "kkl/networks/networks.hpp"

namespace kkl {

struct ObserverMatrices {
  Matrix A;  // [n_z, n_z]
  Matrix B;  // [n_z, n_y]

  std::size_t n_z() const { return static_cast<std::size_t>(A.rows()); }
  std::size_t n_y() const { return static_cast<std::size_t>(B.cols()); }
};

std::size_t latent_dim(std::size_t n_x, std::size_t n_y);

/// A = -diag(1..n_z), B = ones with n_z = n_y (2 n_x + 1).
ObserverMatrices build_matrices(std::size_t n_x, std::size_t n_y);
/// A = diag(a_diag), B = ones.
ObserverMatrices diagonal_matrices(const std::vector<double>& a_diag, std::size_t n_y);

struct MatrixReport {
  bool hurwitz = false;
  bool controllable = false;
  double kappa = 0.0;
  double lambda = 0.0;
};

MatrixReport check_matrices(const ObserverMatrices& m);

enum class Variant { Autonomous, Obs, Dyn, Curriculum };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

/// Everything needed to run one observer variant.
struct ModelBundle {
  Variant variant = Variant::Autonomous;
  std::string system;
  NetConfig net;
  ObserverMatrices mats;
  double dt = 0.05;
  /// enc.*, dec.* plus inj.* (obs) or hyp.* (dyn).
  TensorMap params;

  bool uses_injection() const { return variant == Variant::Obs; }
  bool uses_hyper() const { return variant == Variant::Dyn; }
  /// Throws ShapeError when the parameter set does not match the variant.
  void validate() const;
};

struct EstimateTrace {
  std::vector<double> times;
  Matrix z;      // [N+1, n_z]
  Matrix x_hat;  // [N+1, n_x]
  bool diverged = false;
};

/// Row k of the result is (u_{k-omega+1}, ..., u_k) flattened, zero-padded before t_0.
Matrix input_windows(const Matrix& inputs, std::size_t omega);
/// Window ending at grid index k for one trajectory's input matrix.
Tensor window_at(const Matrix& inputs, std::size_t k, std::size_t omega);

/// Runs the latent observer with fixed-step RK4 at the grid spacing on every
/// trajectory in lock-step (all must share one grid) and decodes each step.
/// Trials whose latent state goes non-finite are marked diverged.
std::vector<EstimateTrace> run_observer_batch(const ModelBundle& bundle,
                                              std::span<const Trajectory> measured,
                                              const Vector& z0);
EstimateTrace run_observer(const ModelBundle& bundle, const Trajectory& measured, const Vector& z0);

/// Static decoder for autonomous/obs/curriculum, delta-modulated decoder for dyn.
Vector decode(const ModelBundle& bundle, const Vector& z, const Tensor& window);
Vector encode(const ModelBundle& bundle, const Vector& x, const Tensor& window);

/// Leaf names used by the residual graph.
struct ResidualInputs {
  static constexpr const char* x = "x";
  static constexpr const char* xdot = "xdot";
  static constexpr const char* y = "y";
  static constexpr const char* window = "window";
  static constexpr const char* window_next = "window_next";
};

struct ResidualNodes {
  ad::NodeId x, xdot, y, window, window_next;
  ad::NodeId z;         // T(x, t)
  ad::NodeId residual;  // dT/dx f + dT/dt - (A T + B y)
  std::optional<nets::HyperNodes> hyper;
};

/// Appends the batched PDE residual. With `dynamic`, the encoder is modulated
/// by the hypernetwork and the time derivative is the window JVP along
/// (window_next - window) / dt; otherwise dT/dt = 0.
ResidualNodes residual_nodes(ad::Graph& g, const NetConfig& net, const ObserverMatrices& mats,
                             double dt, bool dynamic);

/// z A^T + y B^T for batched rows.
ad::NodeId latent_drift(ad::Graph& g, const ObserverMatrices& mats, ad::NodeId z, ad::NodeId y);

/// Single-sample residual for the bundle's encoder.
Vector pde_residual(const ModelBundle& bundle, const SystemSpec& spec, const Vector& x,
                    const Vector& u, const Tensor& window, const Tensor& window_next);

}  // namespace kkl

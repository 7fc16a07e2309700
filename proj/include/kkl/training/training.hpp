#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kkl/diffcore/graph.hpp"
#include "kkl/diffcore/rng.hpp"
#include "kkl/dynamics/integrate.hpp"
#include "kkl/dynamics/signal.hpp"
#include "kkl/dynamics/systems.hpp"
#include "kkl/networks/networks.hpp"
#include "kkl/observer/observer.hpp"

namespace kkl {

struct TrainConfig {
  std::size_t n_traj = 20;
  std::size_t n_inp = 15;
  double horizon = 50.0;
  double dt = 0.05;

  std::size_t epochs_a = 200;  // phase-1 encoder
  std::size_t epochs_b = 200;  // phase-1 decoder
  std::size_t epochs = 100;    // phase-2 and curriculum
  std::size_t batch = 256;
  /// Batches drawn per epoch after shuffling; 0 means a full pass.
  std::size_t batches_per_epoch = 0;

  double lr_phase1 = 1e-3;
  double lr = 1e-4;
  double lr_min = 1e-6;
  double clip = 1.0;
  double nu_max = 0.1;
  std::size_t warmup_epochs = 5;
  double lambda_pde = 1.0;

  double plateau_factor = 0.5;
  std::size_t plateau_patience = 10;
  double plateau_min_lr = 1e-6;

  /// Project decoder weights to unit spectral norm after each phase-1 decoder step.
  bool spectral_norm = false;
  std::uint64_t seed = 0;

  void validate() const;
};

/// nu_max * min(1, epoch / warmup)
double pde_weight(const TrainConfig& cfg, std::size_t epoch);
/// ln(1e4) / lambda
double burn_in_time(const ObserverMatrices& mats);
std::size_t burn_in_steps(const ObserverMatrices& mats, double dt);

/// (x, z) co-simulation system: x' = f(x, u), z' = A z + B h(x).
SystemSpec augmented_spec(const SystemSpec& spec, const ObserverMatrices& mats);

/// Initial conditions drawn uniformly from the system's box.
Vector sample_initial_condition(const SystemSpec& spec, Rng& rng);

struct AutonomousDataset {
  Matrix x;     // [N, n_x]
  Matrix xdot;  // f(x, 0)
  Matrix z;     // [N, n_z]
  Matrix y;  // [N, n_y]
  std::size_t burn_steps = 0;
  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

AutonomousDataset build_autonomous_dataset(const SystemSpec& spec, const ObserverMatrices& mats,
                                           const TrainConfig& cfg, Rng& rng);

/// Input-driven samples. Windows are not stored per sample; they are cut
/// from the owning trajectory's input column on demand.
struct ForcedDataset {
  std::size_t omega = 0;
  std::size_t n_u = 1;
  double dt = 0.05;
  std::size_t burn_steps = 0;
  std::vector<InputSignal> signals;  // one per input index
  std::vector<Matrix> inputs;        // per trajectory, [N_step+1, n_u]
  std::vector<std::size_t> signal_of;

  Matrix x, xdot, y, u;  // per sample
  Matrix z;              // co-simulated latent, only meaningful once step >= burn_steps
  std::vector<std::uint32_t> traj_of;
  std::vector<std::uint32_t> step_of;

  std::size_t size() const { return traj_of.size(); }
  InputKind kind_of(std::size_t sample) const { return signals[signal_of[traj_of[sample]]].kind; }
  /// Rows are the windows ending at step k (and k + 1) of each sample.
  Matrix windows(std::span<const std::size_t> samples, bool next = false) const;
};

/// N_traj initial conditions x N_inp signals (kinds cycle constant, sinusoid,
/// square), samples at k = omega .. N_step - 1.
ForcedDataset build_forced_dataset(const SystemSpec& spec, const ObserverMatrices& mats,
                                   const TrainConfig& cfg, std::size_t omega, Rng& rng);

struct EpochMetrics {
  std::string stage;
  std::size_t epoch = 0;
  std::map<std::string, double> terms;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};
using MetricsSink = std::function<void(const EpochMetrics&)>;

/// A scalar training loss with named diagnostic terms and the leaves it trains.
struct LossGraph {
  ad::Graph g;
  std::vector<std::pair<std::string, ad::NodeId>> terms;
  std::vector<std::string> trainable;
};

/// Leaves: x, xdot, y, z_target, nu. Trains enc.*.
LossGraph encoder_loss(const NetConfig& net, const ObserverMatrices& mats);
/// Leaves: z, x. Trains dec.*.
LossGraph decoder_loss(const NetConfig& net);
/// Leaves: z, zdot, y, window. Trains inj.*.
LossGraph obs_loss(const NetConfig& net, const ObserverMatrices& mats);
/// Leaves: x, xdot, y, window, window_next. Trains hyp.*.
LossGraph dyn_loss(const NetConfig& net, const ObserverMatrices& mats, double dt, double lambda_pde);

/// Names of the leaves in `params` starting with `prefix`.
std::vector<std::string> names_with_prefix(const TensorMap& params, const std::string& prefix);

/// Returns enc.* and dec.*.
TensorMap train_phase1(const NetConfig& net, const ObserverMatrices& mats, const AutonomousDataset& data,
                       const TrainConfig& cfg, const MetricsSink& sink = {});

/// Frozen-encoder targets for the obs loss: z = T(x), zdot = dT/dx xdot.
void encode_with_tangent(const NetConfig& net, const TensorMap& base, const Matrix& x, const Matrix& xdot,
                         Matrix& z, Matrix& zdot);

/// Returns inj.*; `base` is only read.
TensorMap train_obs(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                    const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink = {});

/// Returns hyp.*; `base` is only read.
TensorMap train_dyn(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                    const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink = {});

/// Fine-tuned copy of enc.* and dec.*, one stage per nonzero input kind.
TensorMap train_curriculum(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                           const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink = {});

/// Stage order used by train_curriculum.
std::vector<InputKind> curriculum_stages();

/// Mean of an element-mean loss over the dataset, evaluated in batches.
double obs_dataset_loss(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& params,
                        const ForcedDataset& data, std::span<const std::size_t> samples,
                        const Matrix& z, const Matrix& zdot, bool zero_phi = false);

}  // namespace kkl

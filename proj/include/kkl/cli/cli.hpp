#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kkl/analysis/analysis.hpp"
#include "kkl/io/container.hpp"
#include "kkl/training/training.hpp"

namespace kkl::cli {

using io::Json;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalAbort = 3, kMissingPrerequisite = 4 };

/// Default document for a system; every accepted key appears here.
Json default_config(const std::string& system = "duffing");

/// Resolved, typed view of one configuration document.
struct RunConfig {
  Json doc;
  SystemSpec spec;
  NetConfig net;
  ObserverMatrices mats;
  std::uint64_t seed = 0;
  TrainConfig train;  // "train" before per-stage overrides

  BenchmarkConfig eval;
  std::vector<Variant> variants;
  std::vector<Variant> bound_variants;
  std::size_t grid_per_axis = 50;
  std::size_t input_levels = 16;
  InputKind bound_regime = InputKind::Zero;
  std::size_t bound_trials = 50;
  std::size_t bound_stride = 10;
  double w_bar = 0.0;
  double v_bar = 0.0;

  /// "phase1", "obs", "dyn" or "curriculum": train with that stage's overrides.
  TrainConfig stage(const std::string& name) const;
};

/// defaults(system) <- file <- --set overrides <- seed. Unknown keys are a ConfigError.
RunConfig resolve_config(const std::optional<std::string>& config_path, const std::vector<std::string>& sets,
                         const std::optional<std::uint64_t>& seed);
RunConfig parse_config(const Json& doc);

/// Applies "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_set(Json& doc, const std::string& assignment);

/// Same as the kkl executable; returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace kkl::cli

#pragma once

#include <cstddef>
#include <optional>

#include "kkl/diffcore/tensor.hpp"

namespace kkl {

/// Scales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm. Returns g (before clipping).
double clip_global_norm(TensorMap& grads, double max_norm);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moment buffers are keyed like the
/// parameter map they were created for.
class Adam {
 public:
  Adam(const TensorMap& params, AdamConfig config);

  void step(TensorMap& params, const TensorMap& grads);

  double lr() const { return config_.lr; }
  void set_lr(double lr);
  std::size_t steps() const { return steps_; }
  const TensorMap& first_moment() const { return m_; }
  const TensorMap& second_moment() const { return v_; }

 private:
  AdamConfig config_;
  TensorMap m_;
  TensorMap v_;
  std::size_t steps_ = 0;
};

/// lr(e) = lr_min + (lr0 - lr_min) (1 + cos(pi e / E)) / 2
class CosineSchedule {
 public:
  CosineSchedule(double lr0, double lr_min, std::size_t total_epochs);
  double at(std::size_t epoch) const;

 private:
  double lr0_;
  double lr_min_;
  std::size_t total_;
};

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for more than `patience` consecutive epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr0, double factor = 0.5, std::size_t patience = 10, double min_lr = 1e-6,
                  double threshold = 1e-4);
  /// Feed one epoch's monitored loss; returns the learning rate to use next.
  double step(double loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double min_lr_;
  double threshold_;
  std::optional<double> best_;
  std::size_t bad_epochs_ = 0;
};

}  // namespace kkl

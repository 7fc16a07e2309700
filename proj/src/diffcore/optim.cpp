#include "kkl/diffcore/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kkl/error.hpp"

namespace kkl {

double clip_global_norm(TensorMap& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm needs max_norm > 0");
  const double norm = std::sqrt(squared_norm(grads));
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) g.mat() *= s;
  }
  return norm;
}

Adam::Adam(const TensorMap& params, AdamConfig config) : config_(config) {
  set_lr(config.lr);
  for (const auto& [name, p] : params) {
    m_.emplace(name, Tensor(p.shape()));
    v_.emplace(name, Tensor(p.shape()));
  }
}

void Adam::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  config_.lr = lr;
}

void Adam::step(TensorMap& params, const TensorMap& grads) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    auto mit = m_.find(name);
    if (git == grads.end() || mit == m_.end()) {
      throw ShapeError("adam: no gradient or state for parameter '" + name + "'");
    }
    const Tensor& g = git->second;
    if (g.shape() != p.shape()) {
      throw ShapeError("adam: gradient shape " + shape_string(g.shape()) + " for parameter '" +
                       name + "' of shape " + shape_string(p.shape()));
    }
    auto m = mit->second.mat().array();
    auto v = v_.at(name).mat().array();
    const auto ga = g.mat().array();
    m = config_.beta1 * m + (1.0 - config_.beta1) * ga;
    v = config_.beta2 * v + (1.0 - config_.beta2) * ga.square();
    p.mat().array() -= config_.lr * (m / c1) / ((v / c2).sqrt() + config_.eps);
  }
}

CosineSchedule::CosineSchedule(double lr0, double lr_min, std::size_t total_epochs)
    : lr0_(lr0), lr_min_(lr_min), total_(std::max<std::size_t>(total_epochs, 1)) {}

double CosineSchedule::at(std::size_t epoch) const {
  const double e = static_cast<double>(std::min(epoch, total_));
  return lr_min_ +
         0.5 * (lr0_ - lr_min_) * (1.0 + std::cos(std::numbers::pi * e / static_cast<double>(total_)));
}

PlateauSchedule::PlateauSchedule(double lr0, double factor, std::size_t patience, double min_lr,
                                 double threshold)
    : lr_(lr0), factor_(factor), patience_(patience), min_lr_(min_lr), threshold_(threshold) {}

double PlateauSchedule::step(double loss) {
  // Relative-threshold improvement test, as in the common "rel" mode.
  if (!best_ || loss < *best_ * (1.0 - threshold_)) {
    best_ = loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ > patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_epochs_ = 0;
  }
  return lr_;
}

}  // namespace kkl

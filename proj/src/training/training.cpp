#include "kkl/training/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>

#include "kkl/diffcore/optim.hpp"
#include "kkl/error.hpp"

namespace kkl {

void TrainConfig::validate() const {
  if (n_traj == 0 || n_inp == 0) throw ConfigError("n_traj and n_inp must be positive");
  if (!(horizon > 0.0) || !(dt > 0.0)) throw ConfigError("horizon and dt must be positive");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0) || !(lr_phase1 > 0.0) || !(lr_min > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(clip > 0.0)) throw ConfigError("clip must be positive");
  if (nu_max < 0.0 || lambda_pde < 0.0) throw ConfigError("loss weights must be non-negative");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
}

double pde_weight(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.warmup_epochs == 0) return cfg.nu_max;
  return cfg.nu_max * std::min(1.0, static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs));
}

double burn_in_time(const ObserverMatrices& mats) {
  const auto rep = check_matrices(mats);
  if (!rep.hurwitz) throw ConfigError("observer matrix A is not Hurwitz");
  return std::log(1e4) / rep.lambda;
}

std::size_t burn_in_steps(const ObserverMatrices& mats, double dt) {
  return static_cast<std::size_t>(std::ceil(burn_in_time(mats) / dt - 1e-9));
}

SystemSpec augmented_spec(const SystemSpec& spec, const ObserverMatrices& mats) {
  if (mats.n_y() != spec.n_y) throw ShapeError("observer B width differs from n_y");
  SystemSpec aug = spec;
  const auto n_x = static_cast<Eigen::Index>(spec.n_x);
  const auto n_z = static_cast<Eigen::Index>(mats.n_z());
  aug.name = spec.name + "+z";
  aug.n_x = spec.n_x + mats.n_z();
  aug.drift = [spec, mats, n_x, n_z](const Vector& s, const Vector& u) {
    Vector d(n_x + n_z);
    const Vector x = s.head(n_x);
    d.head(n_x) = spec.f(x, u);
    d.tail(n_z) = mats.A * s.tail(n_z) + mats.B * spec.h(x);
    return d;
  };
  aug.output = [spec, n_x](const Vector& s) { return spec.h(s.head(n_x)); };
  aug.ic_box.clear();
  return aug;
}

Vector sample_initial_condition(const SystemSpec& spec, Rng& rng) {
  if (spec.ic_box.size() != spec.n_x) throw ConfigError(spec.name + ": initial-condition box has wrong size");
  Vector x0(static_cast<Eigen::Index>(spec.n_x));
  for (std::size_t i = 0; i < spec.n_x; ++i) x0(static_cast<Eigen::Index>(i)) = rng.uniform(spec.ic_box[i].lo, spec.ic_box[i].hi);
  return x0;
}

AutonomousDataset build_autonomous_dataset(const SystemSpec& spec, const ObserverMatrices& mats,
                                           const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto aug = augmented_spec(spec, mats);
  const auto n_x = static_cast<Eigen::Index>(spec.n_x);
  const auto n_z = static_cast<Eigen::Index>(mats.n_z());
  const std::size_t n_step = uniform_grid(cfg.horizon, cfg.dt).size() - 1;
  AutonomousDataset d;
  d.burn_steps = burn_in_steps(mats, cfg.dt);
  if (d.burn_steps >= n_step) throw ConfigError("horizon shorter than the latent burn-in");
  const std::size_t per = n_step - d.burn_steps;
  const auto total = static_cast<Eigen::Index>(cfg.n_traj * per);
  d.x.resize(total, n_x);
  d.xdot.resize(total, n_x);
  d.z.resize(total, n_z);
  d.y.resize(total, static_cast<Eigen::Index>(spec.n_y));
  const Vector u0 = Vector::Zero(static_cast<Eigen::Index>(spec.n_u));
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < cfg.n_traj; ++i) {
    Vector s0 = Vector::Zero(n_x + n_z);
    s0.head(n_x) = sample_initial_condition(spec, rng);
    const auto tr = integrate(aug, s0, InputSignal{}, cfg.horizon, cfg.dt);
    for (std::size_t k = d.burn_steps; k < n_step; ++k, ++row) {
      const auto kk = static_cast<Eigen::Index>(k);
      d.x.row(row) = tr.states.row(kk).head(n_x);
      d.xdot.row(row) = spec.f(d.x.row(row).transpose(), u0).transpose();
      d.z.row(row) = tr.states.row(kk).tail(n_z);
      d.y.row(row) = tr.outputs.row(kk);
    }
  }
  return d;
}

Matrix ForcedDataset::windows(std::span<const std::size_t> samples, bool next) const {
  const auto w = static_cast<Eigen::Index>(omega);
  const auto nu = static_cast<Eigen::Index>(n_u);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(samples.size()), w * nu);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const std::size_t s = samples[r];
    const Matrix& in = inputs[traj_of[s]];
    const auto end = static_cast<Eigen::Index>(step_of[s]) + (next ? 1 : 0);
    for (Eigen::Index j = 0; j < w; ++j) {
      const Eigen::Index src = end - (w - 1) + j;
      if (src >= 0) out.row(static_cast<Eigen::Index>(r)).segment(j * nu, nu) = in.row(src);
    }
  }
  return out;
}

ForcedDataset build_forced_dataset(const SystemSpec& spec, const ObserverMatrices& mats,
                                   const TrainConfig& cfg, std::size_t omega, Rng& rng) {
  cfg.validate();
  const auto aug = augmented_spec(spec, mats);
  const auto n_x = static_cast<Eigen::Index>(spec.n_x);
  const auto n_z = static_cast<Eigen::Index>(mats.n_z());
  const std::size_t n_step = uniform_grid(cfg.horizon, cfg.dt).size() - 1;
  if (omega == 0 || omega >= n_step) throw ConfigError("window length must lie in [1, N_step)");

  ForcedDataset d;
  d.omega = omega;
  d.n_u = spec.n_u;
  d.dt = cfg.dt;
  d.burn_steps = burn_in_steps(mats, cfg.dt);

  std::vector<Vector> ics;
  for (std::size_t i = 0; i < cfg.n_traj; ++i) ics.push_back(sample_initial_condition(spec, rng));
  const InputKind cycle[] = {InputKind::Constant, InputKind::Sinusoid, InputKind::Square};
  for (std::size_t j = 0; j < cfg.n_inp; ++j) d.signals.push_back(sample_input(cycle[j % 3], rng));

  const std::size_t per = n_step - omega;
  const auto total = static_cast<Eigen::Index>(cfg.n_traj * cfg.n_inp * per);
  d.x.resize(total, n_x);
  d.xdot.resize(total, n_x);
  d.y.resize(total, static_cast<Eigen::Index>(spec.n_y));
  d.u.resize(total, static_cast<Eigen::Index>(spec.n_u));
  d.z.resize(total, n_z);
  d.traj_of.reserve(static_cast<std::size_t>(total));
  d.step_of.reserve(static_cast<std::size_t>(total));

  Eigen::Index row = 0;
  for (std::size_t i = 0; i < cfg.n_traj; ++i) {
    for (std::size_t j = 0; j < cfg.n_inp; ++j) {
      Vector s0 = Vector::Zero(n_x + n_z);
      s0.head(n_x) = ics[i];
      const auto tr = integrate(aug, s0, d.signals[j], cfg.horizon, cfg.dt);
      const auto t_index = static_cast<std::uint32_t>(d.inputs.size());
      d.inputs.push_back(tr.inputs);
      d.signal_of.push_back(j);
      for (std::size_t k = omega; k < n_step; ++k, ++row) {
        const auto kk = static_cast<Eigen::Index>(k);
        const Vector x = tr.states.row(kk).head(n_x).transpose();
        const Vector u = tr.inputs.row(kk).transpose();
        d.x.row(row) = x.transpose();
        d.xdot.row(row) = spec.f(x, u).transpose();
        d.y.row(row) = tr.outputs.row(kk);
        d.u.row(row) = u.transpose();
        d.z.row(row) = tr.states.row(kk).tail(n_z);
        d.traj_of.push_back(t_index);
        d.step_of.push_back(static_cast<std::uint32_t>(k));
      }
    }
  }
  return d;
}

namespace {

ad::NodeId mean_square(ad::Graph& g, ad::NodeId d) { return g.mean(g.mul(d, d)); }

}  // namespace

LossGraph encoder_loss(const NetConfig& net, const ObserverMatrices& mats) {
  LossGraph L;
  auto& g = L.g;
  const auto r = residual_nodes(g, net, mats, 1.0, false);
  const auto mse = mean_square(g, g.sub(r.z, g.input("z_target")));
  const auto pde = mean_square(g, r.residual);
  g.set_output(g.add(mse, g.mul_scalar(pde, g.input("nu"))));
  L.terms = {{"mse", mse}, {"pde", pde}};
  for (std::size_t l = 0; l <= net.hidden_layers; ++l) {
    L.trainable.push_back("enc.W" + std::to_string(l));
    L.trainable.push_back("enc.b" + std::to_string(l));
  }
  return L;
}

LossGraph decoder_loss(const NetConfig& net) {
  LossGraph L;
  auto& g = L.g;
  const auto xh = nets::decoder(g, net, g.input("z"));
  const auto mse = mean_square(g, g.sub(xh, g.input("x")));
  g.set_output(mse);
  L.terms = {{"mse", mse}};
  for (std::size_t l = 0; l <= net.hidden_layers; ++l) {
    L.trainable.push_back("dec.W" + std::to_string(l));
    L.trainable.push_back("dec.b" + std::to_string(l));
  }
  return L;
}

LossGraph obs_loss(const NetConfig& net, const ObserverMatrices& mats) {
  LossGraph L;
  auto& g = L.g;
  const auto z = g.input("z");
  const auto ell = nets::injection_context(g, net, g.input("window"));
  const auto phi = nets::injection_phi(g, net, z, ell);
  const auto zobs = g.add(latent_drift(g, mats, z, g.input("y")), phi);
  const auto aug = mean_square(g, g.sub(zobs, g.input("zdot")));
  g.set_output(aug);
  L.terms = {{"aug", aug}};
  Rng dummy(0);
  for (const auto& [name, t] : init_injection(net, dummy)) L.trainable.push_back(name);
  return L;
}

LossGraph dyn_loss(const NetConfig& net, const ObserverMatrices& mats, double dt, double lambda_pde) {
  LossGraph L;
  auto& g = L.g;
  const auto r = residual_nodes(g, net, mats, dt, true);
  const auto xh = nets::decoder(g, net, r.z, &*r.hyper);
  const auto rec = mean_square(g, g.sub(xh, r.x));
  const auto pde = mean_square(g, r.residual);
  g.set_output(g.add(rec, g.scale(pde, lambda_pde)));
  L.terms = {{"rec", rec}, {"pde", pde}};
  Rng dummy(0);
  for (const auto& [name, t] : init_hyper(net, dummy)) L.trainable.push_back(name);
  return L;
}

std::vector<std::string> names_with_prefix(const TensorMap& params, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& [name, t] : params)
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  return out;
}

namespace {

Tensor gather(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
  return Tensor::from_matrix(std::move(out));
}

TensorMap subset(const TensorMap& params, const std::vector<std::string>& names) {
  TensorMap out;
  for (const auto& n : names) {
    auto it = params.find(n);
    if (it == params.end()) throw ShapeError("missing parameter '" + n + "'");
    out.emplace(n, it->second);
  }
  return out;
}

/// Shuffled mini-batches over `pool`; the last partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> pool, const TrainConfig& cfg,
                                                    Rng& rng) {
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < pool.size(); s += cfg.batch) {
    if (cfg.batches_per_epoch > 0 && out.size() == cfg.batches_per_epoch) break;
    out.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(s),
                     pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), s + cfg.batch)));
  }
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// Sums per-batch values weighted by batch size.
struct EpochAccumulator {
  std::map<std::string, double> sums;
  double weight = 0.0;
  double grad_norm = 0.0;
  std::size_t steps = 0;

  void add(const LossGraph& L, const ad::GradientResult& r, std::size_t rows, double gnorm) {
    const auto w = static_cast<double>(rows);
    sums["loss"] += w * r.value;
    for (std::size_t i = 0; i < L.terms.size(); ++i) sums[L.terms[i].first] += w * r.reported[i];
    weight += w;
    grad_norm += gnorm;
    ++steps;
  }
  EpochMetrics finish(std::string stage, std::size_t epoch, double lr, Clock::time_point t0) const {
    EpochMetrics m;
    m.stage = std::move(stage);
    m.epoch = epoch;
    for (const auto& [k, v] : sums) m.terms[k] = v / weight;
    m.lr = lr;
    m.grad_norm = steps ? grad_norm / static_cast<double>(steps) : 0.0;
    m.wall_ms = ms_since(t0);
    return m;
  }
};

/// One optimiser step on `trained` using the batch bound in `b`.
ad::GradientResult step(const LossGraph& L, ad::Bindings& b, TensorMap& trained, Adam& opt, double clip,
                        double& gnorm, const std::string& stage, std::size_t epoch) {
  std::vector<ad::NodeId> report;
  for (const auto& [n, id] : L.terms) report.push_back(id);
  ad::GradientResult r;
  try {
    r = ad::gradient(L.g, b, L.trainable, report);
  } catch (const NumericalError& e) {
    throw NumericalError(stage + " epoch " + std::to_string(epoch) + ": " + e.what());
  }
  if (!std::isfinite(r.value)) throw NumericalError(stage + " epoch " + std::to_string(epoch) + ": loss is not finite");
  gnorm = clip_global_norm(r.grads, clip);
  if (!std::isfinite(gnorm)) throw NumericalError(stage + " epoch " + std::to_string(epoch) + ": gradient is not finite");
  opt.step(trained, r.grads);
  return r;
}

}  // namespace

namespace {

using BatchBinder = std::function<void(std::span<const std::size_t>, ad::Bindings&)>;

/// One shuffled pass (or the configured number of batches) over `pool`.
EpochMetrics run_epoch(const LossGraph& L, TensorMap& trained, const TensorMap* frozen, Adam& opt,
                       const BatchBinder& bind, const std::vector<std::size_t>& pool, const TrainConfig& cfg,
                       Rng& rng, const std::string& stage, std::size_t epoch) {
  const auto t0 = Clock::now();
  EpochAccumulator acc;
  for (const auto& idx : epoch_batches(pool, cfg, rng)) {
    ad::Bindings b;
    if (frozen) b.bind_all(*frozen);
    b.bind_all(trained);
    bind(idx, b);
    double gn = 0.0;
    const auto r = step(L, b, trained, opt, cfg.clip, gn, stage, epoch);
    acc.add(L, r, idx.size(), gn);
  }
  return acc.finish(stage, epoch, opt.lr(), t0);
}

void project_spectral(TensorMap& dec, SpectralState& state) {
  MlpWeights w = load_mlp(dec, "dec");
  w = spectral_normalize(w, 1, state);
  store_mlp(dec, "dec", w);
}

}  // namespace

TensorMap train_phase1(const NetConfig& net, const ObserverMatrices& mats, const AutonomousDataset& data,
                       const TrainConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("empty autonomous dataset");
  Rng rng = Rng(cfg.seed).derive(11);
  Rng init_rng = Rng(cfg.seed).derive(12);
  TensorMap base = init_base(net, init_rng);
  const auto pool = iota(data.size());

  // Stage A: encoder on latent targets plus the PDE residual.
  const LossGraph enc = encoder_loss(net, mats);
  TensorMap enc_p = subset(base, enc.trainable);
  Adam adam_a(enc_p, AdamConfig{.lr = cfg.lr_phase1});
  PlateauSchedule plateau_a(cfg.lr_phase1, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr);
  for (std::size_t epoch = 0; epoch < cfg.epochs_a; ++epoch) {
    const Tensor nu = Tensor::scalar(pde_weight(cfg, epoch)).reshaped({1, 1});
    const BatchBinder bind = [&](std::span<const std::size_t> idx, ad::Bindings& b) {
      b.set("x", gather(data.x, idx));
      b.set("xdot", gather(data.xdot, idx));
      b.set("y", gather(data.y, idx));
      b.set("z_target", gather(data.z, idx));
      b.bind("nu", nu);
    };
    auto m = run_epoch(enc, enc_p, nullptr, adam_a, bind, pool, cfg, rng, "phase1-encoder", epoch);
    m.terms["nu"] = nu[0];
    adam_a.set_lr(plateau_a.step(m.terms["loss"]));
    if (sink) sink(m);
  }
  for (auto& [k, v] : enc_p) base[k] = v;

  // Stage B: decoder on regenerated targets z = T(x).
  Matrix z;
  {
    ad::Graph g;
    const auto out = nets::encoder(g, net, g.input("x"));
    ad::Bindings b;
    b.bind_all(enc_p);
    b.set("x", Tensor::from_matrix(data.x));
    z = ad::evaluate(g, b, out).mat();
  }
  const LossGraph dec = decoder_loss(net);
  TensorMap dec_p = subset(base, dec.trainable);
  SpectralState spectral;
  if (cfg.spectral_norm) project_spectral(dec_p, spectral);
  Adam adam_b(dec_p, AdamConfig{.lr = cfg.lr_phase1});
  PlateauSchedule plateau_b(cfg.lr_phase1, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr);
  const BatchBinder bind_b = [&](std::span<const std::size_t> idx, ad::Bindings& b) {
    b.set("x", gather(data.x, idx));
    b.set("z", gather(z, idx));
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs_b; ++epoch) {
    if (!cfg.spectral_norm) {
      auto m = run_epoch(dec, dec_p, nullptr, adam_b, bind_b, pool, cfg, rng, "phase1-decoder", epoch);
      adam_b.set_lr(plateau_b.step(m.terms["loss"]));
      if (sink) sink(m);
      continue;
    }
    // Same loop, with the projection after every optimiser step.
    const auto t0 = Clock::now();
    EpochAccumulator acc;
    for (const auto& idx : epoch_batches(pool, cfg, rng)) {
      ad::Bindings b;
      b.bind_all(dec_p);
      bind_b(idx, b);
      double gn = 0.0;
      const auto r = step(dec, b, dec_p, adam_b, cfg.clip, gn, "phase1-decoder", epoch);
      project_spectral(dec_p, spectral);
      acc.add(dec, r, idx.size(), gn);
    }
    auto m = acc.finish("phase1-decoder", epoch, adam_b.lr(), t0);
    adam_b.set_lr(plateau_b.step(m.terms["loss"]));
    if (sink) sink(m);
  }
  for (auto& [k, v] : dec_p) base[k] = v;
  return base;
}

void encode_with_tangent(const NetConfig& net, const TensorMap& base, const Matrix& x, const Matrix& xdot,
                         Matrix& z, Matrix& zdot) {
  ad::Graph g;
  const auto xi = g.input("x");
  const auto out = nets::encoder(g, net, xi);
  const auto tan = g.jvp(out, xi, g.input("xdot"));
  z.resize(x.rows(), static_cast<Eigen::Index>(net.n_z));
  zdot.resize(x.rows(), static_cast<Eigen::Index>(net.n_z));
  // chunked to bound the tape size
  const Eigen::Index chunk = 4096;
  for (Eigen::Index s = 0; s < x.rows(); s += chunk) {
    const Eigen::Index n = std::min(chunk, x.rows() - s);
    ad::Bindings b;
    b.bind_all(base);
    b.set("x", Tensor::from_matrix(x.middleRows(s, n)));
    b.set("xdot", Tensor::from_matrix(xdot.middleRows(s, n)));
    const ad::NodeId targets[] = {out, tan};
    const auto tape = ad::forward(g, b, targets);
    z.middleRows(s, n) = tape.value(out).mat();
    zdot.middleRows(s, n) = tape.value(tan).mat();
  }
}

TensorMap train_obs(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                    const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("empty forced dataset");
  if (data.omega != net.omega) throw ConfigError("dataset window length differs from the network's");
  Rng rng = Rng(cfg.seed).derive(21);
  Rng init_rng = Rng(cfg.seed).derive(22);
  TensorMap inj = init_injection(net, init_rng);

  // The base is frozen, so encoder targets are computed once.
  Matrix z, zdot;
  encode_with_tangent(net, base, data.x, data.xdot, z, zdot);

  const LossGraph L = obs_loss(net, mats);
  Adam adam(inj, AdamConfig{.lr = cfg.lr});
  const CosineSchedule cosine(cfg.lr, cfg.lr_min, cfg.epochs);
  const auto pool = iota(data.size());
  const BatchBinder bind = [&](std::span<const std::size_t> idx, ad::Bindings& b) {
    b.set("z", gather(z, idx));
    b.set("zdot", gather(zdot, idx));
    b.set("y", gather(data.y, idx));
    b.set("window", Tensor::from_matrix(data.windows(idx)));
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.set_lr(cosine.at(epoch));
    const auto m = run_epoch(L, inj, nullptr, adam, bind, pool, cfg, rng, "obs", epoch);
    if (sink) sink(m);
  }
  return inj;
}

double obs_dataset_loss(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& params,
                        const ForcedDataset& data, std::span<const std::size_t> samples, const Matrix& z,
                        const Matrix& zdot, bool zero_phi) {
  if (samples.empty()) throw ConfigError("no samples to evaluate");
  const LossGraph L = obs_loss(net, mats);
  double total = 0.0;
  const std::size_t chunk = 1024;
  for (std::size_t s = 0; s < samples.size(); s += chunk) {
    const auto idx = samples.subspan(s, std::min(chunk, samples.size() - s));
    const Matrix zb = gather(z, idx).mat();
    const Matrix yb = gather(data.y, idx).mat();
    const Matrix tb = gather(zdot, idx).mat();
    if (zero_phi) {
      const Matrix d = zb * mats.A.transpose() + yb * mats.B.transpose() - tb;
      total += d.squaredNorm() / static_cast<double>(zb.cols());
      continue;
    }
    ad::Bindings b;
    b.bind_all(params);
    b.set("z", Tensor::from_matrix(zb));
    b.set("zdot", Tensor::from_matrix(tb));
    b.set("y", Tensor::from_matrix(yb));
    b.set("window", Tensor::from_matrix(data.windows(idx)));
    total += ad::evaluate(L.g, b).item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(samples.size());
}

TensorMap train_dyn(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                    const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("empty forced dataset");
  if (data.omega != net.omega) throw ConfigError("dataset window length differs from the network's");
  Rng rng = Rng(cfg.seed).derive(31);
  Rng init_rng = Rng(cfg.seed).derive(32);
  TensorMap hyp = init_hyper(net, init_rng);
  TensorMap fixed = subset(base, names_with_prefix(base, "enc."));
  for (const auto& n : names_with_prefix(base, "dec.")) fixed[n] = base.at(n);

  const LossGraph L = dyn_loss(net, mats, data.dt, cfg.lambda_pde);
  Adam adam(hyp, AdamConfig{.lr = cfg.lr});
  const CosineSchedule cosine(cfg.lr, cfg.lr_min, cfg.epochs);
  const auto pool = iota(data.size());
  const BatchBinder bind = [&](std::span<const std::size_t> idx, ad::Bindings& b) {
    b.set("x", gather(data.x, idx));
    b.set("xdot", gather(data.xdot, idx));
    b.set("y", gather(data.y, idx));
    b.set("window", Tensor::from_matrix(data.windows(idx)));
    b.set("window_next", Tensor::from_matrix(data.windows(idx, true)));
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.set_lr(cosine.at(epoch));
    const auto m = run_epoch(L, hyp, &fixed, adam, bind, pool, cfg, rng, "dyn", epoch);
    if (sink) sink(m);
  }
  return hyp;
}

std::vector<InputKind> curriculum_stages() {
  return {InputKind::Constant, InputKind::Sinusoid, InputKind::Square};
}

TensorMap train_curriculum(const NetConfig& net, const ObserverMatrices& mats, const TensorMap& base,
                           const ForcedDataset& data, const TrainConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("empty forced dataset");
  Rng rng = Rng(cfg.seed).derive(41);

  const LossGraph enc = encoder_loss(net, mats);
  const LossGraph dec = decoder_loss(net);
  TensorMap enc_p = subset(base, enc.trainable);
  TensorMap dec_p = subset(base, dec.trainable);
  Adam adam_e(enc_p, AdamConfig{.lr = cfg.lr});
  Adam adam_d(dec_p, AdamConfig{.lr = cfg.lr});
  const Tensor nu = Tensor::scalar(cfg.nu_max).reshaped({1, 1});

  ad::Graph enc_g;
  const auto enc_out = nets::encoder(enc_g, net, enc_g.input("x"));

  const auto stages = curriculum_stages();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    // equal thirds, remainder to the last stage
    const std::size_t epochs = s + 1 < stages.size() ? cfg.epochs / stages.size()
                                                     : cfg.epochs - (stages.size() - 1) * (cfg.epochs / stages.size());
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.kind_of(i) == stages[s] && data.step_of[i] >= data.burn_steps) pool.push_back(i);
    if (pool.empty()) throw ConfigError("curriculum stage '" + std::string(kind_name(stages[s])) + "' has no samples");
    const std::string stage = "curriculum-" + std::string(kind_name(stages[s]));
    const CosineSchedule cosine(cfg.lr, cfg.lr_min, epochs);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      const auto t0 = Clock::now();
      adam_e.set_lr(cosine.at(epoch));
      adam_d.set_lr(cosine.at(epoch));
      EpochAccumulator acc_e, acc_d;
      for (const auto& idx : epoch_batches(pool, cfg, rng)) {
        const Tensor x = gather(data.x, idx);
        ad::Bindings be;
        be.bind_all(enc_p);
        be.bind("x", x);
        be.set("xdot", gather(data.xdot, idx));
        be.set("y", gather(data.y, idx));
        be.set("z_target", gather(data.z, idx));
        be.bind("nu", nu);
        double gn = 0.0;
        acc_e.add(enc, step(enc, be, enc_p, adam_e, cfg.clip, gn, stage, epoch), idx.size(), gn);

        // decoder on the round trip through the current encoder
        ad::Bindings bz;
        bz.bind_all(enc_p);
        bz.bind("x", x);
        const Tensor z = ad::evaluate(enc_g, bz, enc_out);
        ad::Bindings bd;
        bd.bind_all(dec_p);
        bd.bind("x", x);
        bd.bind("z", z);
        acc_d.add(dec, step(dec, bd, dec_p, adam_d, cfg.clip, gn, stage, epoch), idx.size(), gn);
      }
      auto m = acc_e.finish(stage, epoch, adam_e.lr(), t0);
      const auto md = acc_d.finish(stage, epoch, adam_d.lr(), t0);
      m.terms["rt"] = md.terms.at("loss");
      m.grad_norm = 0.5 * (m.grad_norm + md.grad_norm);
      if (sink) sink(m);
    }
  }
  TensorMap out = enc_p;
  out.merge(dec_p);
  return out;
}

}  // namespace kkl

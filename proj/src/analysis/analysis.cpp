#include "kkl/analysis/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>

#include "json.hpp"

#include "kkl/error.hpp"
#include "kkl/training/training.hpp"

namespace kkl {

double smape(const Matrix& truth, const Matrix& estimate, std::span<const double> times, double t_skip) {
  if (truth.rows() != estimate.rows() || truth.cols() != estimate.cols())
    throw ShapeError("smape: truth and estimate differ in shape");
  if (static_cast<Eigen::Index>(times.size()) != truth.rows()) throw ShapeError("smape: times length differs");
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index k = 0; k < truth.rows(); ++k) {
    if (times[static_cast<std::size_t>(k)] < t_skip) continue;
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
      const double a = truth(k, j), b = estimate(k, j);
      sum += 2.0 * std::abs(a - b) / std::max(std::abs(a) + std::abs(b), kSmapeEps);
      ++n;
    }
  }
  if (n == 0) throw ShapeError("smape: no samples at or after t_skip");
  return 100.0 * sum / static_cast<double>(n);
}

double smape(const Matrix& truth, const Matrix& estimate) {
  std::vector<double> t(static_cast<std::size_t>(truth.rows()), 0.0);
  return smape(truth, estimate, t, 0.0);
}

double worst_case_bound(const BoundConstants& c, double xi_z0, double t) {
  return c.eps_rt + c.ell_dec * (c.kappa * std::exp(-c.lambda * t) * xi_z0 + c.eps_pde * c.kappa / c.lambda);
}

double asymptotic_bound(const BoundConstants& c) {
  return c.eps_rt + c.ell_dec * c.eps_pde * c.kappa / c.lambda;
}

double noisy_bound(const BoundConstants& c) {
  const double r = c.kappa / c.lambda;
  return c.eps_rt + c.ell_dec * (c.eps_pde * r + r * c.ell_enc * c.w_bar + r * c.B_norm * c.v_bar);
}

double power_iteration_norm(const Matrix& J, std::size_t iterations) {
  if (J.size() == 0) return 0.0;
  Vector v = Vector::Ones(J.cols()) / std::sqrt(static_cast<double>(J.cols()));
  for (std::size_t i = 0; i < iterations; ++i) {
    Vector w = J.transpose() * (J * v);
    const double n = w.norm();
    if (n == 0.0) {
      // started orthogonal to the top singular space or J = 0
      if (J.norm() == 0.0) return 0.0;
      v = Vector::Unit(J.cols(), static_cast<Eigen::Index>(i % static_cast<std::size_t>(J.cols())));
      continue;
    }
    v = w / n;
  }
  return (J * v).norm();
}

Matrix lattice(const SystemSpec& spec, std::size_t per_axis) {
  if (per_axis < 2) throw ConfigError("lattice needs at least two points per axis");
  const std::size_t d = spec.n_x;
  std::size_t total = 1;
  for (std::size_t i = 0; i < d; ++i) total *= per_axis;
  Matrix out(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rem = p;
    for (std::size_t i = d; i-- > 0;) {
      const std::size_t k = rem % per_axis;
      rem /= per_axis;
      const auto& box = spec.ic_box[i];
      out(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) =
          box.lo + (box.hi - box.lo) * static_cast<double>(k) / static_cast<double>(per_axis - 1);
    }
  }
  return out;
}

std::vector<double> input_levels(std::size_t n) {
  if (n == 0) throw ConfigError("need at least one input level");
  if (n == 1) return {0.0};
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

namespace {

// the window GRU unrolls omega steps per row, so conditioned variants need small chunks
Eigen::Index chunk_rows(const ModelBundle& b) { return b.variant == Variant::Autonomous || b.variant == Variant::Curriculum ? 2048 : 128; }

Tensor basis_rows(Eigen::Index rows, Eigen::Index dim, Eigen::Index j) {
  Matrix m = Matrix::Zero(rows, dim);
  m.col(j).setOnes();
  return Tensor::from_matrix(std::move(m));
}

Tensor constant_window(Eigen::Index rows, const NetConfig& net, double u) {
  return Tensor::from_matrix(Matrix::Constant(rows, static_cast<Eigen::Index>(net.window_width()), u));
}

/// Dense per-row Jacobian from jvp outputs: column j of sample r is row r of cols[j].
Matrix row_jacobian(const std::vector<Matrix>& cols, Eigen::Index r) {
  Matrix J(cols.front().cols(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) J.col(static_cast<Eigen::Index>(j)) = cols[j].row(r).transpose();
  return J;
}

/// Encoder-side graph: residual (with injection for obs), round trip and encoder Jacobian.
struct EncoderSide {
  ad::Graph g;
  ad::NodeId z, residual, roundtrip;
  std::vector<ad::NodeId> jac;
};

EncoderSide encoder_side(const ModelBundle& bundle) {
  EncoderSide e;
  auto& g = e.g;
  const auto r = residual_nodes(g, bundle.net, bundle.mats, bundle.dt, bundle.uses_hyper());
  e.z = r.z;
  e.residual = r.residual;
  if (bundle.uses_injection()) {
    const auto ell = nets::injection_context(g, bundle.net, g.input(ResidualInputs::window));
    e.residual = g.sub(r.residual, nets::injection_phi(g, bundle.net, r.z, ell));
  }
  const auto xh = nets::decoder(g, bundle.net, r.z, r.hyper ? &*r.hyper : nullptr);
  e.roundtrip = g.sub(r.x, xh);
  for (std::size_t j = 0; j < bundle.net.n_x; ++j) e.jac.push_back(g.jvp(r.z, r.x, g.input("e" + std::to_string(j))));
  return e;
}

struct DecoderSide {
  ad::Graph g;
  std::vector<ad::NodeId> jac;
};

DecoderSide decoder_side(const ModelBundle& bundle) {
  DecoderSide d;
  auto& g = d.g;
  std::optional<nets::HyperNodes> hn;
  if (bundle.uses_hyper()) hn = nets::hyper(g, bundle.net, g.input("window"));
  const auto z = g.input("z");
  const auto out = nets::decoder(g, bundle.net, z, hn ? &*hn : nullptr);
  for (std::size_t j = 0; j < bundle.net.n_z; ++j) d.jac.push_back(g.jvp(out, z, g.input("e" + std::to_string(j))));
  return d;
}

double max_jacobian_norm(const ModelBundle& bundle, const DecoderSide& dec, const Matrix& z, double u) {
  double best = 0.0;
  const auto n_z = static_cast<Eigen::Index>(bundle.net.n_z);
  const Eigen::Index chunk = chunk_rows(bundle);
  for (Eigen::Index s = 0; s < z.rows(); s += chunk) {
    const Eigen::Index n = std::min(chunk, z.rows() - s);
    ad::Bindings b;
    b.bind_all(bundle.params);
    b.set("z", Tensor::from_matrix(z.middleRows(s, n)));
    if (bundle.uses_hyper()) b.set("window", constant_window(n, bundle.net, u));
    for (Eigen::Index j = 0; j < n_z; ++j) b.set("e" + std::to_string(j), basis_rows(n, n_z, j));
    const auto tape = ad::forward(dec.g, b, dec.jac);
    std::vector<Matrix> cols;
    for (auto id : dec.jac) cols.push_back(tape.value(id).mat());
    for (Eigen::Index r = 0; r < n; ++r) best = std::max(best, power_iteration_norm(row_jacobian(cols, r)));
  }
  return best;
}

struct GridStats {
  double max_res = 0.0, sum_res = 0.0;
  double max_rt = 0.0;
  double max_enc = 0.0;
  double max_dec = 0.0;
  std::size_t count = 0;
};

GridStats grid_stats(const ModelBundle& bundle, const SystemSpec& spec, const ConstantGrid& grid, bool jacobians) {
  bundle.validate();
  if (grid.states.rows() == 0 || grid.inputs.empty()) throw ConfigError("constant grid is empty");
  if (grid.states.cols() != static_cast<Eigen::Index>(spec.n_x)) throw ShapeError("grid states have wrong width");
  const auto n_x = static_cast<Eigen::Index>(spec.n_x);
  const EncoderSide enc = encoder_side(bundle);
  std::optional<DecoderSide> dec;
  if (jacobians) dec = decoder_side(bundle);

  GridStats st;
  for (double u : grid.inputs) {
    const Vector uv = Vector::Constant(static_cast<Eigen::Index>(spec.n_u), u);
    for (Eigen::Index s = 0; s < grid.states.rows(); s += chunk_rows(bundle)) {
      const Eigen::Index n = std::min(chunk_rows(bundle), grid.states.rows() - s);
      const Matrix x = grid.states.middleRows(s, n);
      Matrix xdot(n, n_x), y(n, static_cast<Eigen::Index>(spec.n_y));
      for (Eigen::Index r = 0; r < n; ++r) {
        xdot.row(r) = spec.f(x.row(r).transpose(), uv).transpose();
        y.row(r) = spec.h(x.row(r).transpose()).transpose();
      }
      ad::Bindings b;
      b.bind_all(bundle.params);
      b.set(ResidualInputs::x, Tensor::from_matrix(x));
      b.set(ResidualInputs::xdot, Tensor::from_matrix(xdot));
      b.set(ResidualInputs::y, Tensor::from_matrix(y));
      const Tensor w = constant_window(n, bundle.net, u);
      b.bind(ResidualInputs::window, w);
      b.bind(ResidualInputs::window_next, w);
      for (Eigen::Index j = 0; j < n_x; ++j) b.set("e" + std::to_string(j), basis_rows(n, n_x, j));

      std::vector<ad::NodeId> targets{enc.z, enc.residual, enc.roundtrip};
      if (jacobians) targets.insert(targets.end(), enc.jac.begin(), enc.jac.end());
      const auto tape = ad::forward(enc.g, b, targets);
      const Matrix& res = tape.value(enc.residual).mat();
      const Matrix& rt = tape.value(enc.roundtrip).mat();
      for (Eigen::Index r = 0; r < n; ++r) {
        const double rn = res.row(r).norm();
        st.max_res = std::max(st.max_res, rn);
        st.sum_res += rn;
        st.max_rt = std::max(st.max_rt, rt.row(r).norm());
      }
      st.count += static_cast<std::size_t>(n);
      if (!jacobians) continue;
      std::vector<Matrix> cols;
      for (auto id : enc.jac) cols.push_back(tape.value(id).mat());
      for (Eigen::Index r = 0; r < n; ++r) st.max_enc = std::max(st.max_enc, power_iteration_norm(row_jacobian(cols, r)));
      st.max_dec = std::max(st.max_dec, max_jacobian_norm(bundle, *dec, tape.value(enc.z).mat(), u));
    }
    if (jacobians && grid.latent.rows() > 0) st.max_dec = std::max(st.max_dec, max_jacobian_norm(bundle, *dec, grid.latent, u));
  }
  return st;
}

}  // namespace

BoundConstants estimate_constants(const ModelBundle& bundle, const SystemSpec& spec, const ConstantGrid& grid,
                                  double w_bar, double v_bar) {
  if (w_bar < 0.0 || v_bar < 0.0) throw ConfigError("noise sups must be non-negative");
  const auto rep = check_matrices(bundle.mats);
  if (!rep.hurwitz) throw ConfigError("observer matrix A is not Hurwitz");
  const auto st = grid_stats(bundle, spec, grid, true);
  BoundConstants c;
  c.kappa = rep.kappa;
  c.lambda = rep.lambda;
  c.eps_pde = st.max_res;
  c.eps_rt = st.max_rt;
  c.ell_enc = st.max_enc;
  c.ell_dec = st.max_dec;
  c.B_norm = Eigen::JacobiSVD<Matrix>(bundle.mats.B).singularValues()(0);
  c.w_bar = w_bar;
  c.v_bar = v_bar;
  return c;
}

double mean_pde_residual(const ModelBundle& bundle, const SystemSpec& spec, const ConstantGrid& grid) {
  const auto st = grid_stats(bundle, spec, grid, false);
  return st.sum_res / static_cast<double>(st.count);
}

double BoundCheck::fraction() const {
  if (holds.empty()) return 0.0;
  return static_cast<double>(std::count(holds.begin(), holds.end(), true)) / static_cast<double>(holds.size());
}

BoundCheck check_bound(const ModelBundle& bundle, const BoundConstants& c, std::span<const Trajectory> truth,
                       std::span<const EstimateTrace> estimates, double t_skip) {
  if (truth.size() != estimates.size()) throw ShapeError("check_bound: trajectory and estimate counts differ");
  BoundCheck out;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& tr = truth[i];
    const auto& est = estimates[i];
    if (est.diverged) {
      out.holds.push_back(false);
      out.worst_ratio.push_back(INFINITY);
      continue;
    }
    const Vector zeta0 = encode(bundle, tr.states.row(0).transpose(), window_at(tr.inputs, 0, bundle.net.omega));
    const double xi0 = (zeta0 - est.z.row(0).transpose()).norm();
    double worst = 0.0;
    for (std::size_t k = 0; k < tr.times.size(); ++k) {
      if (tr.times[k] < t_skip) continue;
      const auto kk = static_cast<Eigen::Index>(k);
      const double err = (tr.states.row(kk) - est.x_hat.row(kk)).norm();
      worst = std::max(worst, err / worst_case_bound(c, xi0, tr.times[k]));
    }
    out.holds.push_back(worst <= 1.0);
    out.worst_ratio.push_back(worst);
  }
  return out;
}

TestSet make_test_set(const SystemSpec& spec, InputKind regime, const BenchmarkConfig& cfg, bool noisy) {
  TestSet ts;
  const Rng base = Rng(cfg.seed).derive(1000 + static_cast<std::uint64_t>(regime));
  const std::size_t steps = uniform_grid(cfg.horizon, cfg.dt).size() - 1;
  for (std::size_t i = 0; i < cfg.n_trials; ++i) {
    Rng rng = base.derive(i);
    const Vector x0 = sample_initial_condition(spec, rng);
    const InputSignal sig = sample_input(regime, rng);
    if (noisy) {
      const Matrix w = draw_process_noise(steps, spec.n_x, cfg.sigma2, rng);
      ts.truth.push_back(integrate(spec, x0, sig, cfg.horizon, cfg.dt, Method::Rk45, &w));
      ts.measured.push_back(add_noise(ts.truth.back(), cfg.sigma2, rng));
    } else {
      ts.truth.push_back(integrate(spec, x0, sig, cfg.horizon, cfg.dt));
      ts.measured.push_back(ts.truth.back());
    }
  }
  return ts;
}

double SmapeReport::mean(Variant v, InputKind r) const {
  const auto& t = trials.at(v).at(r);
  if (t.empty()) return 0.0;
  double s = 0.0;
  for (double x : t) s += x;
  return s / static_cast<double>(t.size());
}

SmapeReport run_benchmark(const std::vector<ModelBundle>& bundles, const SystemSpec& spec,
                          const BenchmarkConfig& cfg) {
  if (bundles.empty()) throw ConfigError("no observer bundles to evaluate");
  if (cfg.n_trials == 0) throw ConfigError("n_trials must be positive");
  for (const auto& b : bundles) {
    b.validate();
    if (std::abs(b.dt - cfg.dt) > 1e-12 * cfg.dt) throw ConfigError("bundle and evaluation grid spacing differ");
  }
  SmapeReport rep;
  rep.system = spec.name;
  rep.seed = cfg.seed;
  rep.t_skip = cfg.t_skip;
  rep.n_trials = cfg.n_trials;
  rep.regimes = cfg.regimes;
  for (const auto& b : bundles) rep.variants.push_back(b.variant);

  for (auto regime : cfg.regimes) {
    const auto ts = make_test_set(spec, regime, cfg, cfg.sigma2 > 0.0);
    for (const auto& b : bundles) {
      const Vector z0 = Vector::Zero(static_cast<Eigen::Index>(b.net.n_z));
      const auto est = run_observer_batch(b, ts.measured, z0);
      auto& cell = rep.trials[b.variant][regime];
      auto& div = rep.diverged[b.variant][regime];
      div = 0;
      for (std::size_t i = 0; i < est.size(); ++i) {
        double s = kSmapeCap;
        if (!est[i].diverged && est[i].x_hat.allFinite())
          s = smape(ts.truth[i].states, est[i].x_hat, ts.truth[i].times, cfg.t_skip);
        else
          ++div;
        cell.push_back(std::min(s, kSmapeCap));
      }
    }
  }
  return rep;
}

void write_table_csv(std::ostream& os, std::span<const SmapeReport> reports, const std::vector<std::string>& preamble) {
  if (reports.empty()) throw ConfigError("no reports to tabulate");
  for (const auto& line : preamble) os << "# " << line << '\n';
  os << "variant";
  for (const auto& r : reports)
    for (auto k : r.regimes) os << ',' << r.system << '/' << kind_name(k);
  os << '\n';
  std::vector<Variant> rows;
  for (const auto& r : reports)
    for (auto v : r.variants)
      if (std::find(rows.begin(), rows.end(), v) == rows.end()) rows.push_back(v);
  std::ostringstream cell;
  cell << std::fixed << std::setprecision(4);
  for (auto v : rows) {
    os << variant_name(v);
    for (const auto& r : reports) {
      for (auto k : r.regimes) {
        os << ',';
        if (!r.trials.count(v)) continue;
        cell.str("");
        cell << r.mean(v, k);
        os << cell.str();
      }
    }
    os << '\n';
  }
}

std::string report_json(const SmapeReport& report) {
  nlohmann::ordered_json j;
  j["system"] = report.system;
  j["seed"] = report.seed;
  j["t_skip"] = report.t_skip;
  j["n_trials"] = report.n_trials;
  j["smape_eps"] = kSmapeEps;
  j["divergence_cap"] = kSmapeCap;
  j["cells"] = nlohmann::ordered_json::array();
  for (auto v : report.variants) {
    for (auto k : report.regimes) {
      nlohmann::ordered_json c;
      c["variant"] = variant_name(v);
      c["regime"] = kind_name(k);
      c["mean"] = report.mean(v, k);
      c["diverged"] = report.diverged.at(v).at(k);
      c["trials"] = report.trials.at(v).at(k);
      j["cells"].push_back(std::move(c));
    }
  }
  return j.dump(2);
}

}  // namespace kkl

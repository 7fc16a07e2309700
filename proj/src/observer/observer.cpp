#include "kkl/observer/observer.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "kkl/error.hpp"

namespace kkl {

std::size_t latent_dim(std::size_t n_x, std::size_t n_y) { return n_y * (2 * n_x + 1); }

ObserverMatrices diagonal_matrices(const std::vector<double>& a_diag, std::size_t n_y) {
  if (a_diag.empty() || n_y == 0) throw ConfigError("observer matrices need n_z >= 1 and n_y >= 1");
  const auto n = static_cast<Eigen::Index>(a_diag.size());
  ObserverMatrices m;
  m.A = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) m.A(i, i) = a_diag[static_cast<std::size_t>(i)];
  m.B = Matrix::Ones(n, static_cast<Eigen::Index>(n_y));
  return m;
}

ObserverMatrices build_matrices(std::size_t n_x, std::size_t n_y) {
  if (n_x == 0 || n_y == 0) throw ConfigError("n_x and n_y must be at least 1");
  std::vector<double> diag(latent_dim(n_x, n_y));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = -static_cast<double>(i + 1);
  return diagonal_matrices(diag, n_y);
}

MatrixReport check_matrices(const ObserverMatrices& m) {
  MatrixReport r;
  const Eigen::Index n = m.A.rows();
  if (n == 0 || m.A.cols() != n || m.B.rows() != n) throw ShapeError("observer matrices have inconsistent shapes");

  const bool diagonal = (m.A - Matrix(m.A.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
  Eigen::VectorXcd eig;
  if (diagonal) {
    eig = m.A.diagonal().cast<std::complex<double>>();
    r.kappa = 1.0;
  } else {
    const Eigen::EigenSolver<Eigen::MatrixXd> es(m.A);
    eig = es.eigenvalues();
    const Eigen::JacobiSVD<Eigen::MatrixXcd> svd(es.eigenvectors());
    const auto& sv = svd.singularValues();
    r.kappa = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
  }
  double max_re = -std::numeric_limits<double>::infinity();
  double min_abs_re = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < eig.size(); ++i) {
    max_re = std::max(max_re, eig(i).real());
    min_abs_re = std::min(min_abs_re, std::abs(eig(i).real()));
  }
  r.hurwitz = max_re < 0.0;
  r.lambda = min_abs_re;

  const Eigen::Index p = m.B.cols();
  Eigen::MatrixXd K(n, n * p);
  Eigen::MatrixXd block = m.B;
  for (Eigen::Index i = 0; i < n; ++i) {
    K.middleCols(i * p, p) = block;
    block = m.A * block;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(K);
  const auto& sv = svd.singularValues();
  const double tol = 1e-8 * sv(0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > tol;
  r.controllable = rank == n;
  return r;
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Autonomous: return "autonomous";
    case Variant::Obs: return "obs";
    case Variant::Dyn: return "dyn";
    case Variant::Curriculum: return "curriculum";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::Autonomous, Variant::Obs, Variant::Dyn, Variant::Curriculum})
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

void ModelBundle::validate() const {
  for (const char* name : {"enc.W0", "dec.W0"})
    if (!params.contains(name)) throw ShapeError(std::string("bundle lacks ") + name);
  if (uses_injection() && !params.contains("inj.proj")) throw ShapeError("obs bundle lacks injection weights");
  if (uses_hyper() && !params.contains("hyp.s")) throw ShapeError("dyn bundle lacks hypernetwork weights");
  const auto& W0 = params.at("enc.W0");
  if (W0.shape().size() != 2 || W0.shape()[1] != net.n_x) throw ShapeError("encoder input width != n_x");
  if (mats.n_z() != net.n_z) throw ShapeError("observer matrices do not match n_z");
}

Matrix input_windows(const Matrix& inputs, std::size_t omega) {
  const Eigen::Index rows = inputs.rows();
  const auto n_u = inputs.cols();
  const auto w = static_cast<Eigen::Index>(omega);
  Matrix out = Matrix::Zero(rows, w * n_u);
  for (Eigen::Index k = 0; k < rows; ++k) {
    for (Eigen::Index j = 0; j < w; ++j) {
      const Eigen::Index src = k - (w - 1) + j;
      if (src >= 0) out.row(k).segment(j * n_u, n_u) = inputs.row(src);
    }
  }
  return out;
}

Tensor window_at(const Matrix& inputs, std::size_t k, std::size_t omega) {
  const auto n_u = static_cast<std::size_t>(inputs.cols());
  Tensor t(Shape{1, omega * n_u});
  for (std::size_t j = 0; j < omega; ++j) {
    const auto src = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(omega - 1) +
                     static_cast<std::ptrdiff_t>(j);
    if (src < 0) continue;
    for (std::size_t c = 0; c < n_u; ++c)
      t[j * n_u + c] = inputs(static_cast<Eigen::Index>(src), static_cast<Eigen::Index>(c));
  }
  return t;
}

ad::NodeId latent_drift(ad::Graph& g, const ObserverMatrices& mats, ad::NodeId z, ad::NodeId y) {
  return g.add(g.matmul_nt(z, g.constant(Tensor::from_matrix(mats.A))),
               g.matmul_nt(y, g.constant(Tensor::from_matrix(mats.B))));
}

ResidualNodes residual_nodes(ad::Graph& g, const NetConfig& net, const ObserverMatrices& mats,
                             double dt, bool dynamic) {
  ResidualNodes r;
  r.x = g.input(ResidualInputs::x);
  r.xdot = g.input(ResidualInputs::xdot);
  r.y = g.input(ResidualInputs::y);
  if (dynamic) {
    r.window = g.input(ResidualInputs::window);
    r.window_next = g.input(ResidualInputs::window_next);
    r.hyper = nets::hyper(g, net, r.window);
  }
  r.z = nets::encoder(g, net, r.x, r.hyper ? &*r.hyper : nullptr);
  ad::NodeId dz = g.jvp(r.z, r.x, r.xdot);
  if (dynamic) {
    const ad::NodeId wdot = g.scale(g.sub(r.window_next, r.window), 1.0 / dt);
    dz = g.add(dz, g.jvp(r.z, r.window, wdot));
  }
  r.residual = g.sub(dz, latent_drift(g, mats, r.z, r.y));
  return r;
}

namespace {

Tensor row_tensor(const Vector& v) { return Tensor::from_vector(v).reshaped({1, static_cast<std::size_t>(v.size())}); }

Tensor rows_tensor(const Matrix& m) { return Tensor::from_matrix(m); }

}  // namespace

Vector pde_residual(const ModelBundle& bundle, const SystemSpec& spec, const Vector& x,
                    const Vector& u, const Tensor& window, const Tensor& window_next) {
  if (static_cast<std::size_t>(x.size()) != bundle.net.n_x) throw ShapeError("pde_residual: x has wrong dimension");
  ad::Graph g;
  const auto nodes = residual_nodes(g, bundle.net, bundle.mats, bundle.dt, bundle.uses_hyper());
  ad::Bindings b;
  b.bind_all(bundle.params);
  b.set(ResidualInputs::x, row_tensor(x));
  b.set(ResidualInputs::xdot, row_tensor(spec.f(x, u)));
  b.set(ResidualInputs::y, row_tensor(spec.h(x)));
  if (bundle.uses_hyper()) {
    b.set(ResidualInputs::window, window.reshaped({1, window.size()}));
    b.set(ResidualInputs::window_next, window_next.reshaped({1, window_next.size()}));
  }
  return ad::evaluate(g, b, nodes.residual).as_vector();
}

Vector decode(const ModelBundle& bundle, const Vector& z, const Tensor& window) {
  if (static_cast<std::size_t>(z.size()) != bundle.net.n_z) throw ShapeError("decode: z has wrong dimension");
  ad::Graph g;
  std::optional<nets::HyperNodes> hn;
  if (bundle.uses_hyper()) hn = nets::hyper(g, bundle.net, g.input("window"));
  const auto out = nets::decoder(g, bundle.net, g.input("z"), hn ? &*hn : nullptr);
  ad::Bindings b;
  b.bind_all(bundle.params);
  b.set("z", row_tensor(z));
  if (hn) b.set("window", window.reshaped({1, window.size()}));
  return ad::evaluate(g, b, out).as_vector();
}

Vector encode(const ModelBundle& bundle, const Vector& x, const Tensor& window) {
  if (static_cast<std::size_t>(x.size()) != bundle.net.n_x) throw ShapeError("encode: x has wrong dimension");
  ad::Graph g;
  std::optional<nets::HyperNodes> hn;
  if (bundle.uses_hyper()) hn = nets::hyper(g, bundle.net, g.input("window"));
  const auto out = nets::encoder(g, bundle.net, g.input("x"), hn ? &*hn : nullptr);
  ad::Bindings b;
  b.bind_all(bundle.params);
  b.set("x", row_tensor(x));
  if (hn) b.set("window", window.reshaped({1, window.size()}));
  return ad::evaluate(g, b, out).as_vector();
}

namespace {

/// Lock-step observer over a fixed set of trials.
std::vector<EstimateTrace> run_lockstep(const ModelBundle& bundle, std::span<const Trajectory> measured,
                                        const Vector& z0) {
  const std::size_t B = measured.size();
  const auto& ref = measured.front();
  const std::size_t N = ref.steps();
  const double h = ref.dt();
  const auto n_z = static_cast<Eigen::Index>(bundle.net.n_z);
  const auto n_x = static_cast<Eigen::Index>(bundle.net.n_x);
  const std::size_t omega = bundle.net.omega;

  std::vector<Matrix> windows;
  if (bundle.uses_injection() || bundle.uses_hyper()) {
    for (const auto& tr : measured) windows.push_back(input_windows(tr.inputs, omega));
  }
  auto window_batch = [&](std::size_t k) {
    Matrix w(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(omega * bundle.net.n_u));
    for (std::size_t i = 0; i < B; ++i) w.row(static_cast<Eigen::Index>(i)) = windows[i].row(static_cast<Eigen::Index>(k));
    return rows_tensor(w);
  };
  auto y_batch = [&](std::size_t k) {
    Matrix y(static_cast<Eigen::Index>(B), measured.front().outputs.cols());
    for (std::size_t i = 0; i < B; ++i) y.row(static_cast<Eigen::Index>(i)) = measured[i].outputs.row(static_cast<Eigen::Index>(k));
    return y;
  };

  // Decoder (possibly modulated) and injection graphs.
  ad::Graph dec_g;
  std::optional<nets::HyperNodes> hn;
  if (bundle.uses_hyper()) hn = nets::hyper(dec_g, bundle.net, dec_g.input("window"));
  const auto dec_out = nets::decoder(dec_g, bundle.net, dec_g.input("z"), hn ? &*hn : nullptr);

  ad::Graph ctx_g, phi_g;
  ad::NodeId ctx_out{}, phi_out{};
  if (bundle.uses_injection()) {
    ctx_out = nets::injection_context(ctx_g, bundle.net, ctx_g.input("window"));
    phi_out = nets::injection_phi(phi_g, bundle.net, phi_g.input("z"), phi_g.input("ell"));
  }

  const Matrix At = bundle.mats.A.transpose();
  const Matrix Bt = bundle.mats.B.transpose();

  std::vector<EstimateTrace> out(B);
  for (auto& tr : out) {
    tr.times = ref.times;
    tr.z.resize(static_cast<Eigen::Index>(N + 1), n_z);
    tr.x_hat.resize(static_cast<Eigen::Index>(N + 1), n_x);
  }

  Matrix Z(static_cast<Eigen::Index>(B), n_z);
  for (Eigen::Index i = 0; i < Z.rows(); ++i) Z.row(i) = z0.transpose();

  ad::Bindings base;
  base.bind_all(bundle.params);

  for (std::size_t k = 0;; ++k) {
    if (!Z.allFinite()) throw NumericalError("observer latent state is not finite at step " + std::to_string(k));
    Tensor win;
    if (!windows.empty()) win = window_batch(k);

    ad::Bindings db = base;
    const Tensor zt = rows_tensor(Z);
    db.bind("z", zt);
    if (hn) db.bind("window", win);
    const Tensor xh = ad::evaluate(dec_g, db, dec_out);
    for (std::size_t i = 0; i < B; ++i) {
      out[i].z.row(static_cast<Eigen::Index>(k)) = Z.row(static_cast<Eigen::Index>(i));
      out[i].x_hat.row(static_cast<Eigen::Index>(k)) = xh.mat().row(static_cast<Eigen::Index>(i));
    }
    if (k == N) break;

    Tensor ell;
    if (bundle.uses_injection()) {
      ad::Bindings cb = base;
      cb.bind("window", win);
      ell = ad::evaluate(ctx_g, cb, ctx_out);
    }
    const Matrix y0 = y_batch(k);
    const Matrix y1 = y_batch(k + 1);
    const Matrix ymid = 0.5 * (y0 + y1);
    auto rhs = [&](const Matrix& z, const Matrix& y) {
      Matrix d = z * At + y * Bt;
      if (bundle.uses_injection()) {
        ad::Bindings pb = base;
        const Tensor zz = rows_tensor(z);
        pb.bind("z", zz);
        pb.bind("ell", ell);
        d += ad::evaluate(phi_g, pb, phi_out).mat();
      }
      return d;
    };
    const Matrix k1 = rhs(Z, y0);
    const Matrix k2 = rhs(Z + (0.5 * h) * k1, ymid);
    const Matrix k3 = rhs(Z + (0.5 * h) * k2, ymid);
    const Matrix k4 = rhs(Z + h * k3, y1);
    Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return out;
}

}  // namespace

std::vector<EstimateTrace> run_observer_batch(const ModelBundle& bundle,
                                              std::span<const Trajectory> measured,
                                              const Vector& z0) {
  if (measured.empty()) return {};
  bundle.validate();
  if (static_cast<std::size_t>(z0.size()) != bundle.net.n_z) throw ShapeError("z0 has wrong dimension");
  const auto& ref = measured.front();
  for (const auto& tr : measured) {
    if (tr.times.size() != ref.times.size() || tr.times.size() < 2 ||
        std::abs(tr.dt() - bundle.dt) > 1e-12 * bundle.dt) {
      throw ShapeError("trajectories must share the bundle's uniform grid");
    }
    if (static_cast<std::size_t>(tr.outputs.cols()) != bundle.mats.n_y()) throw ShapeError("measurement width != n_y");
  }
  try {
    return run_lockstep(bundle, measured, z0);
  } catch (const NumericalError&) {
    if (measured.size() == 1) {
      EstimateTrace failed;
      failed.times = ref.times;
      failed.diverged = true;
      return {failed};
    }
  }
  // Something diverged: rerun trials one by one so the healthy ones survive.
  std::vector<EstimateTrace> out;
  for (const auto& tr : measured) out.push_back(run_observer_batch(bundle, std::span(&tr, 1), z0).front());
  return out;
}

EstimateTrace run_observer(const ModelBundle& bundle, const Trajectory& measured, const Vector& z0) {
  return run_observer_batch(bundle, std::span(&measured, 1), z0).front();
}

}  // namespace kkl

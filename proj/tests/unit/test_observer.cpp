#include <cmath>
#include <cstring>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "kkl/dynamics/signal.hpp"
#include "kkl/error.hpp"
#include "kkl/observer/observer.hpp"

using namespace kkl;

namespace {

NetConfig tiny_net(std::size_t n_x, std::size_t n_z) {
  NetConfig c;
  c.n_x = n_x;
  c.n_z = n_z;
  c.hidden = 10;
  c.hidden_layers = 2;
  c.gru_hidden = 5;
  c.omega = 6;
  c.ell_dim = 3;
  c.phi_hidden = 7;
  c.backbone = 8;
  c.embed = 3;
  c.rank = 2;
  c.s_init = 0.3;
  return c;
}

ModelBundle make_bundle(Variant v, const SystemSpec& spec, std::uint64_t seed, double dt = 0.05) {
  ModelBundle b;
  b.variant = v;
  b.system = spec.name;
  b.net = tiny_net(spec.n_x, latent_dim(spec.n_x, spec.n_y));
  b.mats = build_matrices(spec.n_x, spec.n_y);
  b.dt = dt;
  Rng rng(seed);
  b.params = init_base(b.net, rng);
  if (v == Variant::Obs) b.params.merge(init_injection(b.net, rng));
  if (v == Variant::Dyn) b.params.merge(init_hyper(b.net, rng));
  return b;
}

// Dense Jacobian of the tanh MLP at x, built layer by layer.
Matrix mlp_jacobian(const MlpWeights& w, const Vector& x) {
  Vector a = x;
  Matrix J = Matrix::Identity(x.size(), x.size());
  for (std::size_t l = 0; l < w.layers(); ++l) {
    Vector pre = w.W[l] * a;
    if (w.b[l].size() > 0) pre += w.b[l];
    J = w.W[l] * J;
    if (l + 1 < w.layers()) {
      a = pre.array().tanh();
      for (Eigen::Index i = 0; i < J.rows(); ++i) J.row(i) *= 1.0 - a(i) * a(i);
    } else {
      a = pre;
    }
  }
  return J;
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("latent dimension and default matrices") {
  CHECK(latent_dim(2, 1) == 5);
  CHECK(latent_dim(3, 1) == 7);
  const auto m = build_matrices(2, 1);
  REQUIRE(m.n_z() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(m.A(i, i) == -(i + 1));
    CHECK(m.B(i, 0) == 1.0);
  }
  CHECK(m.A.sum() == -15.0);
  CHECK(build_matrices(3, 1).n_z() == 7);
}

TEST_CASE("check_matrices") {
  const auto r = check_matrices(build_matrices(2, 1));
  CHECK(r.hurwitz);
  CHECK(r.controllable);
  CHECK(r.kappa == 1.0);
  CHECK(r.lambda == 1.0);

  // Kalman rank by hand: Vandermonde with distinct nodes has full rank.
  const auto m = build_matrices(2, 1);
  Matrix K(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) K(i, j) = std::pow(-(i + 1.0), j);
  CHECK(std::abs(K.determinant()) > 1.0);

  const auto rep = check_matrices(diagonal_matrices({-1.0, -1.0}, 1));
  CHECK_FALSE(rep.controllable);
  CHECK(rep.hurwitz);

  CHECK_FALSE(check_matrices(diagonal_matrices({0.0, -1.0}, 1)).hurwitz);

  // Non-diagonal A: eigenvector conditioning above 1.
  ObserverMatrices nd;
  nd.A = Matrix{{-1.0, 5.0}, {0.0, -2.0}};
  nd.B = Matrix{{0.0}, {1.0}};
  const auto rn = check_matrices(nd);
  CHECK(rn.hurwitz);
  CHECK(rn.controllable);
  CHECK(rn.lambda == doctest::Approx(1.0));
  CHECK(rn.kappa > 1.0);
}

TEST_CASE("variant names round-trip") {
  for (auto v : {Variant::Autonomous, Variant::Obs, Variant::Dyn, Variant::Curriculum})
    CHECK(parse_variant(variant_name(v)) == v);
  CHECK_THROWS_AS(parse_variant("other"), ConfigError);
}

TEST_CASE("input windows are zero-padded and shift by one step") {
  Matrix u(5, 1);
  u << 1, 2, 3, 4, 5;
  const Matrix w = input_windows(u, 3);
  CHECK(w.row(0) == (Matrix(1, 3) << 0, 0, 1).finished());
  CHECK(w.row(1) == (Matrix(1, 3) << 0, 1, 2).finished());
  CHECK(w.row(4) == (Matrix(1, 3) << 3, 4, 5).finished());
  const Tensor t = window_at(u, 4, 3);
  CHECK(t.mat().reshaped<Eigen::RowMajor>(1, 3) == w.row(4));
  for (Eigen::Index k = 1; k < 5; ++k) CHECK(w.row(k).head(2) == w.row(k - 1).tail(2));
}

TEST_CASE("autonomous observer at rest stays at zero") {
  const auto spec = duffing();
  const auto bundle = make_bundle(Variant::Autonomous, spec, 3);
  const auto traj = integrate(spec, Vector::Zero(2), InputSignal{}, 2.0, 0.05);
  const auto est = run_observer(bundle, traj, Vector::Zero(5));
  CHECK_FALSE(est.diverged);
  CHECK(est.z.cwiseAbs().maxCoeff() == 0.0);
  CHECK(est.x_hat.rows() == 41);
}

TEST_CASE("zero input: conditioned observers reproduce the autonomous one bitwise") {
  const auto spec = duffing();
  const auto aut = make_bundle(Variant::Autonomous, spec, 11);
  auto obs = make_bundle(Variant::Obs, spec, 11);
  auto dyn = make_bundle(Variant::Dyn, spec, 11);
  // same base weights everywhere
  for (auto* b : {&obs, &dyn})
    for (const auto& [k, v] : aut.params) b->params[k] = v;

  std::vector<Trajectory> trajs;
  Rng rng(5);
  for (int i = 0; i < 3; ++i) {
    Vector x0(2);
    x0 << rng.uniform(-1, 1), rng.uniform(-1, 1);
    trajs.push_back(integrate(spec, x0, InputSignal{}, 3.0, 0.05));
  }
  const auto ea = run_observer_batch(aut, trajs, Vector::Zero(5));
  const auto eo = run_observer_batch(obs, trajs, Vector::Zero(5));
  const auto ed = run_observer_batch(dyn, trajs, Vector::Zero(5));
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    CHECK(same_bits(ea[i].z, eo[i].z));
    CHECK(same_bits(ea[i].x_hat, eo[i].x_hat));
    CHECK(same_bits(ea[i].z, ed[i].z));
    CHECK(same_bits(ea[i].x_hat, ed[i].x_hat));
  }

  // and a nonzero input actually changes them
  InputSignal sig{InputKind::Sinusoid, 1.0, 1.0, 0.0, 0.0};
  const auto forced = integrate(spec, trajs[0].states.row(0).transpose(), sig, 3.0, 0.05);
  CHECK_FALSE(same_bits(run_observer(aut, forced, Vector::Zero(5)).z, run_observer(obs, forced, Vector::Zero(5)).z));
  CHECK_FALSE(same_bits(run_observer(aut, forced, Vector::Zero(5)).x_hat,
                        run_observer(dyn, forced, Vector::Zero(5)).x_hat));
}

TEST_CASE("batched run equals per-trial runs") {
  const auto spec = van_der_pol();
  const auto bundle = make_bundle(Variant::Obs, spec, 2);
  std::vector<Trajectory> trajs;
  Rng rng(9);
  for (int i = 0; i < 3; ++i) {
    Vector x0(2);
    x0 << rng.uniform(-1, 1), rng.uniform(-1, 1);
    trajs.push_back(integrate(spec, x0, sample_input(InputKind::Square, rng), 2.0, 0.05));
  }
  const auto batch = run_observer_batch(bundle, trajs, Vector::Zero(5));
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto single = run_observer(bundle, trajs[i], Vector::Zero(5));
    CHECK((batch[i].z - single.z).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((batch[i].x_hat - single.x_hat).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("scalar linear observer matches closed form") {
  // x' = -x, y = x, z' = -2 z + y with z0 = 0 gives z = x0 (e^-t - e^-2t).
  const auto spec = linear_decay();
  ModelBundle b;
  b.system = spec.name;
  b.net.n_x = 1;
  b.net.n_z = 1;
  b.net.hidden_layers = 0;
  b.mats = diagonal_matrices({-2.0}, 1);
  b.dt = 0.01;
  b.params["enc.W0"] = Tensor::matrix(1, 1, {1.0});
  b.params["enc.b0"] = Tensor::vector({0.0});
  b.params["dec.W0"] = Tensor::matrix(1, 1, {1.0});
  b.params["dec.b0"] = Tensor::vector({0.0});
  const double x0 = 0.8;
  const auto traj = integrate(spec, Vector::Constant(1, x0), InputSignal{}, 5.0, 0.01);
  const auto est = run_observer(b, traj, Vector::Zero(1));
  double worst = 0.0;
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const double t = traj.times[k];
    const double ref = x0 * (std::exp(-t) - std::exp(-2 * t));
    worst = std::max(worst, std::abs(est.z(static_cast<Eigen::Index>(k), 0) - ref));
    // error to the true state decays at least as fast as e^{-|a| t}
    CHECK(std::abs(est.x_hat(static_cast<Eigen::Index>(k), 0) - traj.states(static_cast<Eigen::Index>(k), 0)) <=
          x0 * std::exp(-2 * t) + 1e-8);
  }
  // y is linearly interpolated inside a step: |y - y_lin| <= h^2/8 max|y''| = h^2 x0 / 8,
  // filtered through z' = -2 z that is at most half of it.
  CHECK(worst < b.dt * b.dt * x0 / 16);
  CHECK(worst > 0.0);
}

TEST_CASE("latent contraction between two initial conditions") {
  const auto spec = duffing();
  const auto bundle = make_bundle(Variant::Autonomous, spec, 4);
  const double lambda_from = check_matrices(bundle.mats).lambda;
  Vector x0(2);
  x0 << 0.7, -0.3;
  const auto traj = integrate(spec, x0, InputSignal{}, 6.0, 0.05);
  Vector z1 = Vector::Zero(5);
  Vector z2(5);
  z2 << 1.0, -2.0, 0.5, 3.0, -1.0;
  const auto e1 = run_observer(bundle, traj, z1);
  const auto e2 = run_observer(bundle, traj, z2);
  const double d0 = (z1 - z2).norm();
  for (Eigen::Index k = 0; k < e1.z.rows(); ++k) {
    const double t = traj.times[static_cast<std::size_t>(k)];
    CHECK((e1.z.row(k) - e2.z.row(k)).norm() <= std::exp(-lambda_from * t) * d0 * (1 + 1e-6));
  }
}

TEST_CASE("pde residual: linear hand case is exactly zero") {
  const auto spec = linear_decay();
  ModelBundle b;
  b.system = spec.name;
  b.net.n_x = 1;
  b.net.n_z = 1;
  b.net.hidden_layers = 0;
  b.mats = diagonal_matrices({-2.0}, 1);
  b.params["enc.W0"] = Tensor::matrix(1, 1, {1.0});
  b.params["enc.b0"] = Tensor::vector({0.0});
  b.params["dec.W0"] = Tensor::matrix(1, 1, {1.0});
  b.params["dec.b0"] = Tensor::vector({0.0});
  const Tensor w(Shape{1, b.net.omega});
  for (double x : {-1.3, 0.0, 0.25, 7.0}) {
    const Vector r = pde_residual(b, spec, Vector::Constant(1, x), Vector::Zero(1), w, w);
    CHECK(r(0) == 0.0);
  }
}

TEST_CASE("pde residual: static encoder vs dense Jacobian") {
  const auto spec = duffing();
  const auto bundle = make_bundle(Variant::Autonomous, spec, 21);
  const auto enc = load_mlp(bundle.params, "enc");
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Vector x(2), u(1);
    x << rng.uniform(-1, 1), rng.uniform(-1, 1);
    u << rng.uniform(-1, 1);
    Matrix win = Matrix::Zero(1, static_cast<Eigen::Index>(bundle.net.omega));
    for (Eigen::Index j = 0; j < win.cols(); ++j) win(0, j) = rng.uniform(-1, 1);
    const Tensor w = Tensor::from_matrix(win);
    Matrix wn = win;
    wn(0, 0) += 1.0;
    const Tensor w2 = Tensor::from_matrix(wn);

    const Vector expect = mlp_jacobian(enc, x) * spec.f(x, u) -
                          (bundle.mats.A * mlp_forward(enc, x) + bundle.mats.B * spec.h(x));
    const Vector r = pde_residual(bundle, spec, x, u, w, w);
    CHECK((r - expect).cwiseAbs().maxCoeff() < 1e-10);
    // time term of a static encoder is zero whatever the windows do
    CHECK(pde_residual(bundle, spec, x, u, w, w2) == r);
  }
}

TEST_CASE("pde residual: dynamic time term vs finite differences") {
  const auto spec = duffing();
  const auto bundle = make_bundle(Variant::Dyn, spec, 33);
  Rng rng(12);
  Vector x(2), u(1);
  x << 0.4, -0.6;
  u << 0.3;
  Matrix win(1, static_cast<Eigen::Index>(bundle.net.omega));
  for (Eigen::Index j = 0; j < win.cols(); ++j) win(0, j) = rng.uniform(-1, 1);
  Matrix wn(1, win.cols());
  wn.leftCols(win.cols() - 1) = win.rightCols(win.cols() - 1);
  wn(0, win.cols() - 1) = rng.uniform(-1, 1);
  const Tensor w = Tensor::from_matrix(win);
  const Tensor w2 = Tensor::from_matrix(wn);

  // constant window: only the spatial term remains
  const Vector r0 = pde_residual(bundle, spec, x, u, w, w);
  const Vector r1 = pde_residual(bundle, spec, x, u, w, w2);
  const Vector time_term = r1 - r0;
  CHECK(time_term.norm() > 1e-6);

  const Matrix dir = (wn - win) / bundle.dt;
  const double eps = 1e-6;
  const Vector zp = encode(bundle, x, Tensor::from_matrix(win + eps * dir));
  const Vector zm = encode(bundle, x, Tensor::from_matrix(win - eps * dir));
  const Vector fd = (zp - zm) / (2 * eps);
  CHECK((time_term - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));

  // spatial term by finite differences in x
  const Vector fx = spec.f(x, u);
  const Vector sp = (encode(bundle, x + eps * fx, w) - encode(bundle, x - eps * fx, w)) / (2 * eps);
  const Vector expect0 = sp - (bundle.mats.A * encode(bundle, x, w) + bundle.mats.B * spec.h(x));
  CHECK((r0 - expect0).norm() <= 1e-6 * std::max(1.0, expect0.norm()));
}

TEST_CASE("decode: dyn with zero window equals static decode bitwise") {
  const auto spec = duffing();
  const auto aut = make_bundle(Variant::Autonomous, spec, 40);
  auto dyn = make_bundle(Variant::Dyn, spec, 40);
  for (const auto& [k, v] : aut.params) dyn.params[k] = v;
  const Tensor zero(Shape{1, aut.net.omega});
  Rng rng(1);
  Vector z(5);
  for (int i = 0; i < 5; ++i) z(i) = rng.uniform(-2, 2);
  const Vector a = decode(aut, z, zero);
  const Vector d = decode(dyn, z, zero);
  CHECK(std::memcmp(a.data(), d.data(), sizeof(double) * 2) == 0);
  CHECK(a.isApprox(mlp_forward(load_mlp(aut.params, "dec"), z), 1e-14));
}

TEST_CASE("bundle validation and grid checks") {
  const auto spec = duffing();
  auto b = make_bundle(Variant::Obs, spec, 1);
  b.params.erase("inj.proj");
  CHECK_THROWS_AS(b.validate(), ShapeError);
  const auto ok = make_bundle(Variant::Autonomous, spec, 1);
  const auto traj = integrate(spec, Vector::Zero(2), InputSignal{}, 1.0, 0.1);
  CHECK_THROWS_AS(run_observer(ok, traj, Vector::Zero(5)), ShapeError);
  CHECK_THROWS_AS(run_observer(ok, integrate(spec, Vector::Zero(2), InputSignal{}, 1.0, 0.05), Vector::Zero(3)),
                  ShapeError);
}

TEST_CASE("divergent trial is flagged, others survive") {
  const auto spec = duffing();
  auto bundle = make_bundle(Variant::Autonomous, spec, 6);
  auto good = integrate(spec, Vector::Zero(2), InputSignal{}, 1.0, 0.05);
  auto bad = good;
  bad.outputs(5, 0) = std::numeric_limits<double>::infinity();
  const std::vector<Trajectory> both{good, bad};
  const auto est = run_observer_batch(bundle, both, Vector::Zero(5));
  CHECK_FALSE(est[0].diverged);
  CHECK(est[1].diverged);
  CHECK(est[0].z.rows() == 21);
}

#include <cmath>

#include <Eigen/SVD>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "kkl/error.hpp"
#include "kkl/networks/networks.hpp"

using namespace kkl;
using kkl::testing::random_tensor;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.n_x = 2;
  c.n_z = 5;
  c.hidden = 12;
  c.hidden_layers = 2;
  c.gru_hidden = 6;
  c.omega = 7;
  c.ell_dim = 3;
  c.phi_hidden = 8;
  c.backbone = 10;
  c.embed = 4;
  c.rank = 2;
  return c;
}

// Loop-only MLP used as the oracle for mlp_forward.
std::vector<double> loop_mlp(const MlpWeights& w, std::vector<double> x) {
  for (std::size_t l = 0; l < w.layers(); ++l) {
    std::vector<double> y(static_cast<std::size_t>(w.W[l].rows()));
    for (Eigen::Index o = 0; o < w.W[l].rows(); ++o) {
      double acc = w.b[l].size() > 0 ? w.b[l](o) : 0.0;
      for (Eigen::Index i = 0; i < w.W[l].cols(); ++i) acc += w.W[l](o, i) * x[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(o)] = l + 1 < w.layers() ? std::tanh(acc) : acc;
    }
    x = std::move(y);
  }
  return x;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor window_tensor(const NetConfig& c, Rng& rng, double scale = 1.0) {
  return random_tensor({1, c.window_width()}, rng, -scale, scale);
}

Matrix window_matrix(const NetConfig& c, const Tensor& w) {
  return w.mat().reshaped<Eigen::RowMajor>(static_cast<Eigen::Index>(c.omega),
                                           static_cast<Eigen::Index>(c.n_u));
}

}  // namespace

TEST_CASE("mlp_forward") {
  Rng rng(1);
  MlpWeights zero = init_mlp({3, 4, 2}, rng);
  for (auto& W : zero.W) W.setZero();
  for (auto& b : zero.b) b.setZero();
  CHECK(mlp_forward(zero, Vector::Ones(3)) == Vector::Zero(2));

  MlpWeights one;
  one.W = {Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  one.b = {Vector::Zero(1), Vector::Zero(1)};
  CHECK(mlp_forward(one, Vector::Zero(1))(0) == 0.0);

  const MlpWeights w = init_mlp({2, 150, 150, 150, 5}, rng);
  const Vector x = Vector::Random(2);
  const Vector y = mlp_forward(w, x);
  const auto ref = loop_mlp(w, {x(0), x(1)});
  for (int i = 0; i < 5; ++i) CHECK(std::abs(y(i) - ref[static_cast<std::size_t>(i)]) <= 1e-12);
  CHECK_THROWS_AS(mlp_forward(w, Vector::Zero(3)), ShapeError);

  TensorMap p;
  store_mlp(p, "net", w);
  ad::Graph g;
  g.set_output(nets::mlp(g, "net", 4, g.input("x")));
  ad::Bindings b;
  b.bind_all(p);
  b.set("x", Tensor::from_vector(x).reshaped({1, 2}));
  const Tensor yg = ad::evaluate(g, b);
  for (int i = 0; i < 5; ++i) CHECK(std::abs(yg[static_cast<std::size_t>(i)] - y(i)) <= 1e-12);
  const MlpWeights back = load_mlp(p, "net");
  CHECK(back.W[2] == w.W[2]);
}

TEST_CASE("gru_encode") {
  const NetConfig c = small_config();
  Rng rng(2);
  TensorMap p = init_injection(c, rng);
  const GruWeights w = load_gru(p, "inj.gru");

  const Vector h0 = gru_encode(w, Matrix::Zero(7, 1), 7);
  for (Eigen::Index i = 0; i < h0.size(); ++i) CHECK(h0(i) == 0.0);
  CHECK_THROWS_AS(gru_encode(w, Matrix::Zero(6, 1), 7), ShapeError);

  // One unit, one step, by hand: h = (1 - z) n with h0 = 0.
  GruWeights one{Matrix(3, 1), Matrix(3, 1)};
  one.Wi << 0.3, -0.7, 1.1;
  one.Wh << 0.5, 0.2, -0.4;
  const double u = 0.8;
  const double z = sig(-0.7 * u);
  const double n = std::tanh(1.1 * u);
  CHECK(std::abs(gru_encode(one, Matrix::Constant(1, 1, u), 1)(0) - (1 - z) * n) <= 1e-12);

  const Tensor win = window_tensor(c, rng);
  const Matrix wm = window_matrix(c, win);
  const Vector h = gru_encode(w, wm, c.omega);
  const Vector h2 = gru_encode(w, 2.0 * wm, c.omega);
  CHECK((h2 - 2.0 * h).norm() > 1e-3);  // gates make the encoder non-homogeneous

  ad::Graph g;
  g.set_output(nets::gru(g, "inj.gru", g.input("window"), c.omega, c.n_u, c.gru_hidden));
  ad::Bindings b;
  b.bind_all(p);
  b.bind("window", win);
  const Tensor hg = ad::evaluate(g, b);
  for (Eigen::Index i = 0; i < h.size(); ++i) CHECK(std::abs(hg[static_cast<std::size_t>(i)] - h(i)) <= 1e-12);

  // Bounded sensitivity on bounded windows.
  for (std::size_t k = 0; k < c.window_width(); ++k) {
    Matrix bumped = wm;
    bumped(static_cast<Eigen::Index>(k), 0) += 1e-6;
    const Vector d = (gru_encode(w, bumped, c.omega) - h) / 1e-6;
    CHECK(d.allFinite());
    CHECK(d.norm() < 10.0);
  }
}

TEST_CASE("injection collapse and shape") {
  NetConfig c = small_config();
  Rng rng(3);
  const TensorMap p = init_injection(c, rng);
  const Vector z = Vector::Random(5);
  const Vector phi0 = injection(c, p, z, Tensor(Shape{1, c.window_width()}));
  CHECK(phi0.size() == 5);
  for (Eigen::Index i = 0; i < 5; ++i) CHECK(phi0(i) == 0.0);
  const Vector phi = injection(c, p, z, window_tensor(c, rng));
  CHECK(phi.norm() > 0.0);
  CHECK_THROWS_AS(injection(c, p, Vector::Zero(4), window_tensor(c, rng)), ShapeError);
}

TEST_CASE("hyper_generate: collapse, rank, s = 0") {
  const NetConfig c = small_config();
  Rng rng(4);
  TensorMap p = init_hyper(c, rng);
  const auto layers = modulated_layers(c);
  CHECK(layers.size() == 6);

  const auto zero = hyper_generate(c, p, Tensor(Shape{1, c.window_width()}));
  REQUIRE(zero.delta.size() == layers.size());
  for (const auto& d : zero.delta)
    for (Eigen::Index i = 0; i < d.size(); ++i) CHECK(d.data()[i] == 0.0);

  for (int trial = 0; trial < 5; ++trial) {
    const auto ld = hyper_generate(c, p, window_tensor(c, rng));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      CHECK(static_cast<std::size_t>(ld.delta[l].rows()) == layers[l].d_in);
      CHECK(static_cast<std::size_t>(ld.delta[l].cols()) == layers[l].d_out);
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(ld.delta[l]);
      const auto& sv = svd.singularValues();
      CHECK(sv(0) > 0.0);
      for (Eigen::Index k = static_cast<Eigen::Index>(c.rank); k < sv.size(); ++k) CHECK(sv(k) <= 1e-10);
    }
  }

  p["hyp.s"] = Tensor(Shape{1, 1});
  const auto off = hyper_generate(c, p, window_tensor(c, rng));
  for (const auto& d : off.delta) CHECK(d.cwiseAbs().maxCoeff() == 0.0);

  TensorMap extra = p;
  extra["hyp.head6.W"] = Tensor(Shape{1, 1});
  CHECK_THROWS_AS(hyper_generate(c, extra, window_tensor(c, rng)), ShapeError);
}

TEST_CASE("apply_delta") {
  const NetConfig c = small_config();
  Rng rng(5);
  TensorMap base = init_base(c, rng);
  TensorMap hyp = init_hyper(c, rng);
  hyp["hyp.s"] = Tensor(Shape{1, 1}, std::vector<double>{0.3});
  const MlpWeights enc = load_mlp(base, "enc");

  std::vector<Matrix> zero;
  for (const auto& W : enc.W) zero.push_back(Matrix::Zero(W.cols(), W.rows()));
  const MlpWeights same = apply_delta(enc, zero);
  for (std::size_t l = 0; l < enc.layers(); ++l) CHECK(same.W[l] == enc.W[l]);

  const Tensor win = window_tensor(c, rng);
  const auto ld = hyper_generate(c, hyp, win);
  std::vector<Matrix> d1(ld.delta.begin(), ld.delta.begin() + 3);
  std::vector<Matrix> neg;
  for (const auto& d : d1) neg.push_back(-d);
  const MlpWeights back = apply_delta(apply_delta(enc, d1), neg);
  for (std::size_t l = 0; l < enc.layers(); ++l) {
    CHECK((back.W[l] - enc.W[l]).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(back.b[l] == enc.b[l]);
  }

  const auto ld2 = hyper_generate(c, hyp, window_tensor(c, rng));
  std::vector<Matrix> d2(ld2.delta.begin(), ld2.delta.begin() + 3), d12;
  for (std::size_t l = 0; l < 3; ++l) d12.push_back(d1[l] + d2[l]);
  const MlpWeights two_step = apply_delta(apply_delta(enc, d1), d2);
  const MlpWeights one_step = apply_delta(enc, d12);
  for (std::size_t l = 0; l < 3; ++l) CHECK((two_step.W[l] - one_step.W[l]).cwiseAbs().maxCoeff() <= 1e-15);

  // Batched low-rank path in the graph vs. explicitly summed matrices.
  ad::Graph g;
  const auto hn = nets::hyper(g, c, g.input("window"));
  const auto zenc = nets::encoder(g, c, g.input("x"), &hn);
  const auto xdec = nets::decoder(g, c, g.input("z"), &hn);
  ad::Bindings b;
  b.bind_all(base);
  b.bind_all(hyp);
  b.bind("window", win);
  const Vector x = Vector::Random(2);
  const Vector z = Vector::Random(5);
  b.set("x", Tensor::from_vector(x).reshaped({1, 2}));
  b.set("z", Tensor::from_vector(z).reshaped({1, 5}));
  const std::vector<ad::NodeId> targets{zenc, xdec};
  const auto tape = ad::forward(g, b, targets);
  const Vector ze = mlp_forward(apply_delta(enc, d1), x);
  std::vector<Matrix> ddec(ld.delta.begin() + 3, ld.delta.end());
  const Vector xd = mlp_forward(apply_delta(load_mlp(base, "dec"), ddec), z);
  CHECK((tape.value(zenc).as_vector() - ze).norm() <= 1e-12 * std::max(1.0, ze.norm()));
  CHECK((tape.value(xdec).as_vector() - xd).norm() <= 1e-12 * std::max(1.0, xd.norm()));
  CHECK((ze - mlp_forward(enc, x)).norm() > 1e-6);

  CHECK_THROWS_AS(apply_delta(enc, std::vector<Matrix>(2)), ShapeError);
}

TEST_CASE("spectral_normalize") {
  MlpWeights d;
  d.W = {Matrix(2, 2)};
  d.W[0] << 3, 0, 0, 1;
  d.b = {Vector::Zero(2)};
  SpectralState st;
  const MlpWeights n = spectral_normalize(d, 30, st);
  CHECK(std::abs(n.W[0](0, 0) - 1.0) <= 1e-12);
  CHECK(std::abs(n.W[0](1, 1) - 1.0 / 3.0) <= 1e-12);

  Rng rng(6);
  const MlpWeights r = init_mlp({150, 150}, rng);
  const double exact = Eigen::JacobiSVD<Eigen::MatrixXd>(r.W[0]).singularValues()(0);
  Vector u;
  const double est = spectral_norm(r.W[0], u, 30);
  CAPTURE(exact);
  CAPTURE(est);
  CHECK(std::abs(est - exact) <= 1e-3);

  SpectralState s2;
  const MlpWeights once = spectral_normalize(r, 30, s2);
  CHECK(Eigen::JacobiSVD<Eigen::MatrixXd>(once.W[0]).singularValues()(0) <= 1.0 + 1e-3);
  const MlpWeights twice = spectral_normalize(once, 30, s2);
  CHECK((twice.W[0] - once.W[0]).cwiseAbs().maxCoeff() < 1e-3);

  MlpWeights z;
  z.W = {Matrix::Zero(3, 3)};
  z.b = {Vector::Zero(3)};
  SpectralState s3;
  CHECK(spectral_normalize(z, 3, s3).W[0] == Matrix::Zero(3, 3));
}

TEST_CASE("parameter sets") {
  NetConfig c;
  c.n_x = 2;
  c.n_z = 5;
  Rng rng(7);
  const TensorMap base = init_base(c, rng);
  CHECK(base.at("enc.W0").shape() == Shape{150, 2});
  CHECK(base.at("enc.W3").shape() == Shape{5, 150});
  CHECK(base.at("dec.W3").shape() == Shape{2, 150});
  const TensorMap inj = init_injection(c, rng);
  CHECK(!inj.contains("inj.phi.b1"));
  CHECK(parameter_count(inj) < 20000);
  const TensorMap hyp = init_hyper(c, rng);
  CHECK(hyp.at("hyp.s").item() == 0.01);
  CHECK(hyp.at("hyp.A0").shape() == Shape{2, 4 * 64});
}

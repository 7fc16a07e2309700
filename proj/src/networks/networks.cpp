#include "kkl/networks/networks.hpp"

#include <cmath>
#include <optional>
#include <utility>

#include "kkl/error.hpp"

namespace kkl {

namespace {

std::string idx(const std::string& stem, std::size_t i) { return stem + std::to_string(i); }

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

Vector sigmoid(const Vector& v) { return (1.0 / (1.0 + (-v.array()).exp())).matrix(); }

const Tensor& need(const TensorMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ShapeError("missing parameter '" + name + "'");
  return it->second;
}

}  // namespace

std::vector<std::size_t> NetConfig::encoder_widths() const {
  std::vector<std::size_t> w{n_x};
  for (std::size_t i = 0; i < hidden_layers; ++i) w.push_back(hidden);
  w.push_back(n_z);
  return w;
}

std::vector<std::size_t> NetConfig::decoder_widths() const {
  std::vector<std::size_t> w{n_z};
  for (std::size_t i = 0; i < hidden_layers; ++i) w.push_back(hidden);
  w.push_back(n_x);
  return w;
}

MlpWeights init_mlp(const std::vector<std::size_t>& widths, Rng& rng, bool output_bias) {
  if (widths.size() < 2) throw ShapeError("an MLP needs at least input and output widths");
  MlpWeights w;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double bound = fan_in_bound(widths[l]);
    w.W.push_back(uniform_matrix(widths[l + 1], widths[l], bound, rng));
    const bool bias = output_bias || l + 2 < widths.size();
    w.b.push_back(bias ? Vector(uniform_matrix(widths[l + 1], 1, bound, rng).col(0)) : Vector());
  }
  return w;
}

Vector mlp_forward(const MlpWeights& w, const Vector& x) {
  Vector h = x;
  for (std::size_t l = 0; l < w.layers(); ++l) {
    if (w.W[l].cols() != h.size()) {
      throw ShapeError("mlp layer " + std::to_string(l) + " expects width " +
                       std::to_string(w.W[l].cols()) + ", got " + std::to_string(h.size()));
    }
    Vector y = w.W[l] * h;
    if (w.b[l].size() > 0) y += w.b[l];
    h = l + 1 < w.layers() ? Vector(y.array().tanh()) : y;
  }
  return h;
}

MlpWeights load_mlp(const TensorMap& params, const std::string& prefix) {
  MlpWeights w;
  for (std::size_t l = 0;; ++l) {
    auto it = params.find(prefix + idx(".W", l));
    if (it == params.end()) break;
    w.W.push_back(it->second.mat());
    auto b = params.find(prefix + idx(".b", l));
    w.b.push_back(b == params.end() ? Vector() : b->second.as_vector());
  }
  if (w.W.empty()) throw ShapeError("no MLP weights under prefix '" + prefix + "'");
  return w;
}

void store_mlp(TensorMap& params, const std::string& prefix, const MlpWeights& w) {
  for (std::size_t l = 0; l < w.layers(); ++l) {
    params[prefix + idx(".W", l)] = Tensor::from_matrix(w.W[l]);
    if (w.b[l].size() > 0) params[prefix + idx(".b", l)] = Tensor::from_vector(w.b[l]);
  }
}

GruWeights load_gru(const TensorMap& params, const std::string& prefix) {
  GruWeights w{need(params, prefix + ".Wi").mat(), need(params, prefix + ".Wh").mat()};
  if (w.Wh.rows() != 3 * w.Wh.cols() || w.Wi.rows() != w.Wh.rows()) {
    throw ShapeError("gru weights under '" + prefix + "' have inconsistent shapes");
  }
  return w;
}

Vector gru_encode(const GruWeights& w, const Matrix& window, std::size_t omega) {
  if (static_cast<std::size_t>(window.rows()) != omega || window.cols() != w.Wi.cols()) {
    throw ShapeError("gru window must be " + std::to_string(omega) + " x " +
                     std::to_string(w.Wi.cols()) + ", got " + std::to_string(window.rows()) + " x " +
                     std::to_string(window.cols()));
  }
  const auto H = static_cast<Eigen::Index>(w.hidden());
  Vector h = Vector::Zero(H);
  for (Eigen::Index t = 0; t < window.rows(); ++t) {
    const Vector gx = w.Wi * window.row(t).transpose();
    const Vector gh = w.Wh * h;
    const Vector r = sigmoid(gx.segment(0, H) + gh.segment(0, H));
    const Vector z = sigmoid(gx.segment(H, H) + gh.segment(H, H));
    const Vector n = (gx.segment(2 * H, H) + r.cwiseProduct(gh.segment(2 * H, H))).array().tanh().matrix();
    h = n + z.cwiseProduct(h - n);
  }
  return h;
}

MlpWeights apply_delta(const MlpWeights& base, const std::vector<Matrix>& delta) {
  if (delta.size() != base.layers()) throw ShapeError("delta count does not match layer count");
  MlpWeights out = base;
  for (std::size_t l = 0; l < base.layers(); ++l) {
    if (delta[l].rows() != base.W[l].cols() || delta[l].cols() != base.W[l].rows()) {
      throw ShapeError("delta " + std::to_string(l) + " must be d_in x d_out");
    }
    out.W[l] += delta[l].transpose();
  }
  return out;
}

double spectral_norm(const Matrix& W, Vector& u, std::size_t iterations) {
  if (iterations == 0) throw ConfigError("power iteration needs at least one step");
  if (u.size() != W.rows() || u.norm() == 0.0) u = Vector::Ones(W.rows()).normalized();
  Vector v;
  for (std::size_t i = 0; i < iterations; ++i) {
    v = W.transpose() * u;
    const double nv = v.norm();
    if (nv == 0.0) return 0.0;
    v /= nv;
    u = W * v;
    const double nu = u.norm();
    if (nu == 0.0) return 0.0;
    u /= nu;
  }
  return u.dot(W * v);
}

MlpWeights spectral_normalize(const MlpWeights& w, std::size_t iterations, SpectralState& state) {
  state.u.resize(w.layers());
  MlpWeights out = w;
  for (std::size_t l = 0; l < w.layers(); ++l) {
    const double sigma = spectral_norm(w.W[l], state.u[l], iterations);
    if (sigma > 0.0) out.W[l] /= sigma;
  }
  return out;
}

TensorMap init_base(const NetConfig& cfg, Rng& rng) {
  TensorMap p;
  store_mlp(p, "enc", init_mlp(cfg.encoder_widths(), rng));
  store_mlp(p, "dec", init_mlp(cfg.decoder_widths(), rng));
  return p;
}

namespace {

void init_gru(TensorMap& p, const std::string& prefix, const NetConfig& cfg, Rng& rng) {
  const double bound = fan_in_bound(cfg.gru_hidden);
  p[prefix + ".Wi"] = uniform_tensor({3 * cfg.gru_hidden, cfg.n_u}, bound, rng);
  p[prefix + ".Wh"] = uniform_tensor({3 * cfg.gru_hidden, cfg.gru_hidden}, bound, rng);
}

}  // namespace

TensorMap init_injection(const NetConfig& cfg, Rng& rng) {
  TensorMap p;
  init_gru(p, "inj.gru", cfg, rng);
  p["inj.proj"] = uniform_tensor({cfg.ell_dim, cfg.gru_hidden}, fan_in_bound(cfg.gru_hidden), rng);
  store_mlp(p, "inj.phi", init_mlp({cfg.n_z + cfg.ell_dim, cfg.phi_hidden, cfg.n_z}, rng, false));
  p["inj.gate"] = uniform_tensor({cfg.n_z, cfg.ell_dim}, fan_in_bound(cfg.ell_dim), rng);
  return p;
}

std::vector<ModulatedLayer> modulated_layers(const NetConfig& cfg) {
  std::vector<ModulatedLayer> out;
  for (const auto& [prefix, widths] :
       {std::pair{std::string("enc"), cfg.encoder_widths()}, std::pair{std::string("dec"), cfg.decoder_widths()}}) {
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) out.push_back({prefix, l, widths[l], widths[l + 1]});
  }
  return out;
}

TensorMap init_hyper(const NetConfig& cfg, Rng& rng) {
  TensorMap p;
  init_gru(p, "hyp.gru", cfg, rng);
  const std::size_t H = cfg.gru_hidden, E = cfg.embed, F = cfg.backbone, r = cfg.rank;
  const double b0 = fan_in_bound(H + E);
  p["hyp.bb.W0h"] = uniform_tensor({F, H}, b0, rng);
  p["hyp.bb.W0e"] = uniform_tensor({F, E}, b0, rng);
  p["hyp.bb.b0"] = uniform_tensor({F}, b0, rng);
  p["hyp.bb.W1"] = uniform_tensor({F, F}, fan_in_bound(F), rng);
  p["hyp.bb.b1"] = uniform_tensor({F}, fan_in_bound(F), rng);
  const auto layers = modulated_layers(cfg);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    p[idx("hyp.e", l)] = uniform_tensor({1, E}, 1.0, rng);
    p[idx("hyp.head", l) + ".W"] = uniform_tensor({r * layers[l].d_out, F}, fan_in_bound(F), rng);
    p[idx("hyp.head", l) + ".b"] = uniform_tensor({r * layers[l].d_out}, fan_in_bound(F), rng);
    p[idx("hyp.A", l)] = uniform_tensor({layers[l].d_in, r * H}, fan_in_bound(H), rng);
  }
  p["hyp.s"] = Tensor(Shape{1, 1}, std::vector<double>{cfg.s_init});
  return p;
}

std::size_t parameter_count(const TensorMap& params, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, t] : params)
    if (name.starts_with(prefix)) n += t.size();
  return n;
}

namespace nets {

NodeId gru(Graph& g, const std::string& prefix, NodeId window, std::size_t omega, std::size_t n_u,
           std::size_t H) {
  // Per-gate weight blocks are cut once so the recurrence never slices activations.
  auto gate_rows = [&](NodeId W, std::size_t gate, std::size_t cols) {
    const NodeId flat = g.reshape(W, 1, 3 * H * cols);
    return g.reshape(g.slice_cols(flat, gate * H * cols, H * cols), H, cols);
  };
  const NodeId Wi = g.input(prefix + ".Wi");
  const NodeId Wh = g.input(prefix + ".Wh");
  const NodeId Wir = gate_rows(Wi, 0, n_u), Wiz = gate_rows(Wi, 1, n_u), Win = gate_rows(Wi, 2, n_u);
  const NodeId Whr = gate_rows(Wh, 0, H), Whz = gate_rows(Wh, 1, H), Whn = gate_rows(Wh, 2, H);
  std::optional<NodeId> h;
  for (std::size_t t = 0; t < omega; ++t) {
    const NodeId u = g.slice_cols(window, t * n_u, n_u);
    const NodeId z_pre = g.matmul_nt(u, Wiz);
    const NodeId n_pre = g.matmul_nt(u, Win);
    if (!h) {
      // h = 0: the recurrent terms vanish and h' = n - z n.
      const NodeId z = g.sigmoid(z_pre);
      const NodeId n = g.tanh(n_pre);
      h = g.sub(n, g.mul(z, n));
      continue;
    }
    const NodeId r = g.sigmoid(g.add(g.matmul_nt(u, Wir), g.matmul_nt(*h, Whr)));
    const NodeId z = g.sigmoid(g.add(z_pre, g.matmul_nt(*h, Whz)));
    const NodeId n = g.tanh(g.add(n_pre, g.mul(r, g.matmul_nt(*h, Whn))));
    h = g.add(n, g.mul(z, g.sub(*h, n)));
  }
  if (!h) throw ShapeError("gru window length must be positive");
  return *h;
}

NodeId mlp(Graph& g, const std::string& prefix, std::size_t layers, NodeId x,
           const HyperNodes* hyper, std::size_t offset, bool output_bias) {
  NodeId a = x;
  for (std::size_t l = 0; l < layers; ++l) {
    NodeId pre = g.matmul_nt(a, g.input(prefix + idx(".W", l)));
    if (output_bias || l + 1 < layers) pre = g.add_row(pre, g.input(prefix + idx(".b", l)));
    if (hyper != nullptr) {
      const std::size_t k = offset + l;
      const NodeId q = g.matmul(a, g.input(idx("hyp.A", k)));
      const NodeId p = g.row_block_dot(q, hyper->h);
      pre = g.add(pre, g.mul_scalar(g.row_block_combine(p, hyper->head.at(k)), hyper->s));
    }
    a = l + 1 < layers ? g.tanh(pre) : pre;
  }
  return a;
}

NodeId encoder(Graph& g, const NetConfig& cfg, NodeId x, const HyperNodes* hyper) {
  return mlp(g, "enc", cfg.hidden_layers + 1, x, hyper, 0);
}

NodeId decoder(Graph& g, const NetConfig& cfg, NodeId z, const HyperNodes* hyper) {
  return mlp(g, "dec", cfg.hidden_layers + 1, z, hyper, cfg.hidden_layers + 1);
}

NodeId injection_context(Graph& g, const NetConfig& cfg, NodeId window) {
  const NodeId h = gru(g, "inj.gru", window, cfg.omega, cfg.n_u, cfg.gru_hidden);
  return g.matmul_nt(h, g.input("inj.proj"));
}

NodeId injection_phi(Graph& g, const NetConfig& cfg, NodeId z, NodeId ell) {
  (void)cfg;
  const NodeId body = mlp(g, "inj.phi", 2, g.concat_cols({z, ell}), nullptr, 0, false);
  return g.mul(body, g.matmul_nt(ell, g.input("inj.gate")));
}

HyperNodes hyper(Graph& g, const NetConfig& cfg, NodeId window) {
  HyperNodes out;
  out.h = gru(g, "hyp.gru", window, cfg.omega, cfg.n_u, cfg.gru_hidden);
  out.s = g.input("hyp.s");
  const NodeId hW = g.matmul_nt(out.h, g.input("hyp.bb.W0h"));
  const NodeId W0e = g.input("hyp.bb.W0e");
  const NodeId b0 = g.input("hyp.bb.b0");
  const NodeId W1 = g.input("hyp.bb.W1");
  const NodeId b1 = g.input("hyp.bb.b1");
  const auto layers = modulated_layers(cfg);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const NodeId row = g.add(g.matmul_nt(g.input(idx("hyp.e", l)), W0e), b0);
    const NodeId f0 = g.tanh(g.add_row(hW, row));
    const NodeId f1 = g.tanh(g.add_row(g.matmul_nt(f0, W1), b1));
    const std::string head = idx("hyp.head", l);
    out.head.push_back(g.add_row(g.matmul_nt(f1, g.input(head + ".W")), g.input(head + ".b")));
  }
  return out;
}

}  // namespace nets

namespace {

Tensor as_row(const Tensor& t) { return t.reshaped({1, t.size()}); }

}  // namespace

LowRankDelta hyper_generate(const NetConfig& cfg, const TensorMap& hyper_params,
                            const Tensor& window) {
  if (window.size() != cfg.window_width()) {
    throw ShapeError("window must hold " + std::to_string(cfg.window_width()) + " values");
  }
  const auto layers = modulated_layers(cfg);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!hyper_params.contains(idx("hyp.head", l) + ".W")) throw ShapeError("missing hypernetwork head " + std::to_string(l));
  }
  if (hyper_params.contains(idx("hyp.head", layers.size()) + ".W")) {
    throw ShapeError("hypernetwork has more heads than modulated layers");
  }
  ad::Graph g;
  const auto w = g.input("window");
  const auto hn = nets::hyper(g, cfg, w);
  std::vector<ad::NodeId> targets{hn.h, hn.s};
  targets.insert(targets.end(), hn.head.begin(), hn.head.end());
  ad::Bindings b;
  b.bind_all(hyper_params);
  b.set("window", as_row(window));
  const auto tape = ad::forward(g, b, targets);
  const Vector h = tape.value(hn.h).as_vector();
  const double s = tape.value(hn.s).item();
  const auto H = static_cast<Eigen::Index>(cfg.gru_hidden);
  const auto r = static_cast<Eigen::Index>(cfg.rank);

  LowRankDelta out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix& A = need(hyper_params, idx("hyp.A", l)).mat();
    const auto d_in = static_cast<Eigen::Index>(layers[l].d_in);
    const auto d_out = static_cast<Eigen::Index>(layers[l].d_out);
    Matrix a(d_in, r);
    for (Eigen::Index k = 0; k < d_in; ++k)
      for (Eigen::Index j = 0; j < r; ++j) a(k, j) = A.row(k).segment(j * H, H).dot(h);
    const Tensor& f = tape.value(hn.head[l]);
    Matrix bm(r, d_out);
    for (Eigen::Index j = 0; j < r; ++j)
      for (Eigen::Index o = 0; o < d_out; ++o) bm(j, o) = f[static_cast<std::size_t>(j * d_out + o)];
    out.delta.push_back(s * (a * bm));
    out.a.push_back(std::move(a));
    out.b.push_back(std::move(bm));
  }
  return out;
}

Vector injection(const NetConfig& cfg, const TensorMap& injection_params, const Vector& z,
                 const Tensor& window) {
  if (static_cast<std::size_t>(z.size()) != cfg.n_z) {
    throw ShapeError("injection expects z in R^" + std::to_string(cfg.n_z));
  }
  if (window.size() != cfg.window_width()) {
    throw ShapeError("window must hold " + std::to_string(cfg.window_width()) + " values");
  }
  ad::Graph g;
  const auto ell = nets::injection_context(g, cfg, g.input("window"));
  g.set_output(nets::injection_phi(g, cfg, g.input("z"), ell));
  ad::Bindings b;
  b.bind_all(injection_params);
  b.set("window", as_row(window));
  b.set("z", Tensor::from_vector(z).reshaped({1, cfg.n_z}));
  return ad::evaluate(g, b).as_vector();
}

}  // namespace kkl

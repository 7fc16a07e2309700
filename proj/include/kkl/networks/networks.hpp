#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kkl/diffcore/graph.hpp"
#include "kkl/diffcore/rng.hpp"
#include "kkl/diffcore/tensor.hpp"

namespace kkl {

/// Widths and sizes of every network family for one system.
struct NetConfig {
  std::size_t n_x = 0;
  std::size_t n_u = 1;
  std::size_t n_z = 0;
  std::size_t hidden = 150;
  std::size_t hidden_layers = 3;
  std::size_t gru_hidden = 64;
  std::size_t omega = 100;
  std::size_t ell_dim = 16;
  std::size_t phi_hidden = 64;
  std::size_t backbone = 128;
  std::size_t embed = 16;
  std::size_t rank = 4;
  double s_init = 0.01;

  std::vector<std::size_t> encoder_widths() const;
  std::vector<std::size_t> decoder_widths() const;
  std::size_t window_width() const { return omega * n_u; }
};

// ---------------------------------------------------------------------------
// Plain weight containers and direct (graph-free) evaluation.

/// y = W_L s(... s(W_1 x + b_1) ...) + b_L with s = tanh. W_l is [d_out, d_in].
/// An empty b_l means the layer has no bias.
struct MlpWeights {
  std::vector<Matrix> W;
  std::vector<Vector> b;

  std::size_t layers() const { return W.size(); }
};

MlpWeights init_mlp(const std::vector<std::size_t>& widths, Rng& rng, bool output_bias = true);
Vector mlp_forward(const MlpWeights& w, const Vector& x);
MlpWeights load_mlp(const TensorMap& params, const std::string& prefix);
void store_mlp(TensorMap& params, const std::string& prefix, const MlpWeights& w);

/// Bias-free GRU. Wi is [3H, n_u], Wh is [3H, H]; gate blocks are ordered (r, z, n).
struct GruWeights {
  Matrix Wi;
  Matrix Wh;
  std::size_t hidden() const { return static_cast<std::size_t>(Wh.cols()); }
};

GruWeights load_gru(const TensorMap& params, const std::string& prefix);
/// Final hidden state after running the window rows (oldest first) from h = 0.
Vector gru_encode(const GruWeights& w, const Matrix& window, std::size_t omega);

/// Per-layer factors a_l [d_in, r], b_l [r, d_out] and delta = s a_l b_l.
struct LowRankDelta {
  std::vector<Matrix> a;
  std::vector<Matrix> b;
  std::vector<Matrix> delta;
};

/// W'_l = W_l + delta_l^T; biases unchanged.
MlpWeights apply_delta(const MlpWeights& base, const std::vector<Matrix>& delta);

/// Power-iteration state, one left vector per layer.
struct SpectralState {
  std::vector<Vector> u;
};

/// Largest singular value by power iteration, warm-started from `u` (updated).
double spectral_norm(const Matrix& W, Vector& u, std::size_t iterations);
/// Divides each weight matrix by its estimated spectral norm (zero matrices are left alone).
MlpWeights spectral_normalize(const MlpWeights& w, std::size_t iterations, SpectralState& state);

// ---------------------------------------------------------------------------
// Parameter sets. Names are the graph leaf names used by the builders below.

/// enc.W*, enc.b*, dec.W*, dec.b*
TensorMap init_base(const NetConfig& cfg, Rng& rng);
/// inj.gru.*, inj.proj, inj.phi.*, inj.gate
TensorMap init_injection(const NetConfig& cfg, Rng& rng);
/// hyp.gru.*, hyp.e*, hyp.bb.*, hyp.head*.*, hyp.A*, hyp.s
TensorMap init_hyper(const NetConfig& cfg, Rng& rng);

/// One modulated base layer: (prefix, layer index, d_in, d_out).
struct ModulatedLayer {
  std::string prefix;
  std::size_t layer = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
};
/// Encoder layers followed by decoder layers.
std::vector<ModulatedLayer> modulated_layers(const NetConfig& cfg);

std::size_t parameter_count(const TensorMap& params, const std::string& prefix = "");

// ---------------------------------------------------------------------------
// Graph builders. Inputs are batched row-wise: x is [B, d], window is [B, omega*n_u].

namespace nets {

using ad::Graph;
using ad::NodeId;

/// Context and per-layer right factors produced by the hypernetwork.
struct HyperNodes {
  NodeId h;
  NodeId s;
  std::vector<NodeId> head;  // [B, r*d_out] per modulated layer
};

NodeId gru(Graph& g, const std::string& prefix, NodeId window, std::size_t omega, std::size_t n_u,
           std::size_t hidden);

/// Base MLP; when `hyper` is given, layer l adds s (x a_l) b_l from
/// hyper->head[offset + l].
NodeId mlp(Graph& g, const std::string& prefix, std::size_t layers, NodeId x,
           const HyperNodes* hyper = nullptr, std::size_t offset = 0, bool output_bias = true);

NodeId encoder(Graph& g, const NetConfig& cfg, NodeId x, const HyperNodes* hyper = nullptr);
NodeId decoder(Graph& g, const NetConfig& cfg, NodeId z, const HyperNodes* hyper = nullptr);

/// ell = W_proj gru(window)
NodeId injection_context(Graph& g, const NetConfig& cfg, NodeId window);
/// Phi = phi([z; ell]) * (G ell)
NodeId injection_phi(Graph& g, const NetConfig& cfg, NodeId z, NodeId ell);

HyperNodes hyper(Graph& g, const NetConfig& cfg, NodeId window);

}  // namespace nets

/// Materialised deltas for one window (a single sample), via the graph builders.
LowRankDelta hyper_generate(const NetConfig& cfg, const TensorMap& hyper_params,
                            const Tensor& window);

/// Phi for a single (z, window) pair.
Vector injection(const NetConfig& cfg, const TensorMap& injection_params, const Vector& z,
                 const Tensor& window);

}  // namespace kkl

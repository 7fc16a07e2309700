#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kkl/diffcore/tensor.hpp"

namespace kkl::ad {

/// Handle to a node inside one Graph.
struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op : std::uint8_t {
  Input,
  Constant,
  Zeros,
  Add,
  Sub,
  Neg,
  Scale,
  Mul,
  MulScalar,
  MatMul,
  MatMulNT,
  AddRow,
  Tanh,
  Sigmoid,
  TanhDeriv,
  SigmoidDeriv,
  ConcatCols,
  SliceCols,
  Reshape,
  Sum,
  Mean,
  SquaredNorm,
  RowBlockDot,
  RowBlockCombine,
};

std::string_view op_name(Op op);

/// Symbolic, define-then-run computation over 2-D tensors.
///
/// Nodes are appended in topological order and never removed. Forward-mode
/// derivatives are produced by jvp(), which appends tangent nodes built from
/// the same primitives, so a graph holding JVP nodes can be differentiated in
/// reverse mode like any other graph.
class Graph {
 public:
  struct Node {
    Op op = Op::Input;
    std::vector<NodeId> inputs;
    double scalar = 0.0;
    std::size_t a = 0;  // op-specific integer attributes
    std::size_t b = 0;
    std::string name;                        // Input only
    std::shared_ptr<const Tensor> constant;  // Constant only
    bool from_jvp = false;
  };

  /// Free leaf looked up by name at evaluation. Reusing a name returns the same node.
  NodeId input(const std::string& name);
  NodeId constant(Tensor value);
  /// Zeros with the row count of `like`; `cols` defaults to the column count of `like`.
  NodeId zeros(NodeId like, std::optional<std::size_t> cols = std::nullopt);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double c);
  NodeId mul(NodeId a, NodeId b);
  /// a * s where s holds a single value.
  NodeId mul_scalar(NodeId a, NodeId s);
  NodeId matmul(NodeId a, NodeId b);
  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b);
  /// Adds the single-row `row` to every row of `a`.
  NodeId add_row(NodeId a, NodeId row);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  /// 1 - y^2 for y = tanh(.)
  NodeId tanh_deriv(NodeId y);
  /// y - y^2 for y = sigmoid(.)
  NodeId sigmoid_deriv(NodeId y);
  NodeId concat_cols(std::vector<NodeId> parts);
  NodeId slice_cols(NodeId a, std::size_t start, std::size_t count);
  NodeId reshape(NodeId a, std::size_t rows, std::size_t cols);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId squared_norm(NodeId a);
  /// q: [n, r*k], h: [n, k] -> [n, r]; out(i,j) = sum_k q(i, j*k + k') h(i, k').
  NodeId row_block_dot(NodeId q, NodeId h);
  /// p: [n, r], f: [n, r*d] -> [n, d]; out(i,o) = sum_j p(i,j) f(i, j*d + o).
  NodeId row_block_combine(NodeId p, NodeId f);

  /// Appends nodes computing d(output)/d(wrt) * direction and returns the tangent.
  NodeId jvp(NodeId output, NodeId wrt, NodeId direction);

  void set_output(NodeId id) { output_ = id; }
  NodeId output() const;
  bool has_output() const { return output_.has_value(); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::optional<NodeId> find_input(const std::string& name) const;
  std::vector<std::string> input_names() const;
  bool contains_jvp() const;

 private:
  NodeId push(Node n);
  void check(NodeId id) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
  std::optional<NodeId> output_;
  bool emitting_jvp_ = false;
  bool jvp_applied_ = false;
};

/// Leaf values for an evaluation. Bound tensors are referenced, not copied,
/// and must outlive the evaluation; set() stores an owned copy.
class Bindings {
 public:
  void bind(const std::string& name, const Tensor& value);
  void bind_all(const TensorMap& values);
  void set(const std::string& name, Tensor value);
  const Tensor* find(const std::string& name) const;

 private:
  std::map<std::string, const Tensor*> refs_;
  std::map<std::string, Tensor> owned_;
};

/// Node values cached by one forward sweep.
class Tape {
 public:
  const Tensor& value(NodeId id) const;
  bool computed(NodeId id) const;

 private:
  friend Tape forward(const Graph&, const Bindings&, std::span<const NodeId>);
  std::vector<const Tensor*> view_;
  std::vector<Tensor> owned_;
};

/// Forward sweep over the ancestors of `targets`. Throws ShapeError for
/// unbound leaves or shape mismatches and NumericalError for non-finite values.
Tape forward(const Graph& graph, const Bindings& bindings, std::span<const NodeId> targets);

Tensor evaluate(const Graph& graph, const Bindings& bindings);
Tensor evaluate(const Graph& graph, const Bindings& bindings, NodeId target);

struct GradientResult {
  double value = 0.0;
  TensorMap grads;
  /// Values of the `report` nodes, in order (first element of each).
  std::vector<double> reported;
};

/// Reverse-mode gradient of the scalar graph output with respect to the named leaves.
GradientResult gradient(const Graph& graph, const Bindings& bindings,
                        std::span<const std::string> wrt, std::span<const NodeId> report = {});

/// Reverse-over-forward gradient for loss graphs that contain JVP nodes.
/// The tangent nodes are ordinary primitives, so this is gradient() with a
/// check that the graph actually carries forward-mode nodes.
GradientResult gradient_through_jvp(const Graph& graph, const Bindings& bindings,
                                    std::span<const std::string> wrt, std::span<const NodeId> report = {});

/// Numeric forward-mode directional derivative of the graph output with
/// respect to leaf `wrt` along `direction`.
Tensor jvp(const Graph& graph, const Bindings& bindings, const std::string& wrt,
           const Tensor& direction);

}  // namespace kkl::ad

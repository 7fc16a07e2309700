#include "kkl/diffcore/graph.hpp"

#include <algorithm>
#include <sstream>

#include "kkl/error.hpp"

namespace kkl::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Zeros: return "zeros";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::Mul: return "mul";
    case Op::MulScalar: return "mul_scalar";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::AddRow: return "add_row";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::TanhDeriv: return "tanh_deriv";
    case Op::SigmoidDeriv: return "sigmoid_deriv";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::Reshape: return "reshape";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SquaredNorm: return "squared_norm";
    case Op::RowBlockDot: return "row_block_dot";
    case Op::RowBlockCombine: return "row_block_combine";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(Node n) {
  for (auto in : n.inputs) check(in);
  n.from_jvp = emitting_jvp_;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::check(NodeId id) const {
  if (id.index >= nodes_.size()) throw ShapeError("node id out of range");
}

NodeId Graph::input(const std::string& name) {
  if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
  Node n;
  n.op = Op::Input;
  n.name = name;
  auto id = push(std::move(n));
  inputs_.emplace(name, id);
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.constant = std::make_shared<const Tensor>(std::move(value));
  return push(std::move(n));
}

NodeId Graph::zeros(NodeId like, std::optional<std::size_t> cols) {
  Node n;
  n.op = Op::Zeros;
  n.inputs = {like};
  n.a = cols.value_or(0);
  n.b = cols.has_value() ? 1 : 0;
  return push(std::move(n));
}

namespace {
Graph::Node make(Op op, std::vector<NodeId> inputs, double scalar = 0.0, std::size_t a = 0,
                 std::size_t b = 0) {
  Graph::Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.scalar = scalar;
  n.a = a;
  n.b = b;
  return n;
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) { return push(make(Op::Add, {a, b})); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(make(Op::Sub, {a, b})); }
NodeId Graph::neg(NodeId a) { return push(make(Op::Neg, {a})); }
NodeId Graph::scale(NodeId a, double c) { return push(make(Op::Scale, {a}, c)); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(make(Op::Mul, {a, b})); }
NodeId Graph::mul_scalar(NodeId a, NodeId s) { return push(make(Op::MulScalar, {a, s})); }
NodeId Graph::matmul(NodeId a, NodeId b) { return push(make(Op::MatMul, {a, b})); }
NodeId Graph::matmul_nt(NodeId a, NodeId b) { return push(make(Op::MatMulNT, {a, b})); }
NodeId Graph::add_row(NodeId a, NodeId row) { return push(make(Op::AddRow, {a, row})); }
NodeId Graph::tanh(NodeId a) { return push(make(Op::Tanh, {a})); }
NodeId Graph::sigmoid(NodeId a) { return push(make(Op::Sigmoid, {a})); }
NodeId Graph::tanh_deriv(NodeId y) { return push(make(Op::TanhDeriv, {y})); }
NodeId Graph::sigmoid_deriv(NodeId y) { return push(make(Op::SigmoidDeriv, {y})); }
NodeId Graph::concat_cols(std::vector<NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  return push(make(Op::ConcatCols, std::move(parts)));
}
NodeId Graph::slice_cols(NodeId a, std::size_t start, std::size_t count) {
  return push(make(Op::SliceCols, {a}, 0.0, start, count));
}
NodeId Graph::reshape(NodeId a, std::size_t rows, std::size_t cols) {
  return push(make(Op::Reshape, {a}, 0.0, rows, cols));
}
NodeId Graph::sum(NodeId a) { return push(make(Op::Sum, {a})); }
NodeId Graph::mean(NodeId a) { return push(make(Op::Mean, {a})); }
NodeId Graph::squared_norm(NodeId a) { return push(make(Op::SquaredNorm, {a})); }
NodeId Graph::row_block_dot(NodeId q, NodeId h) { return push(make(Op::RowBlockDot, {q, h})); }
NodeId Graph::row_block_combine(NodeId p, NodeId f) {
  return push(make(Op::RowBlockCombine, {p, f}));
}

NodeId Graph::output() const {
  if (!output_) throw ShapeError("graph has no output");
  return *output_;
}

std::optional<NodeId> Graph::find_input(const std::string& name) const {
  if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
  return std::nullopt;
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : inputs_) names.push_back(name);
  return names;
}

bool Graph::contains_jvp() const {
  return jvp_applied_;
}

// ---------------------------------------------------------------------------
// Forward-mode transform

NodeId Graph::jvp(NodeId output, NodeId wrt, NodeId direction) {
  check(output);
  check(wrt);
  check(direction);
  const std::size_t n_orig = output.index + 1;
  std::vector<std::optional<NodeId>> tan(n_orig);
  emitting_jvp_ = true;
  jvp_applied_ = true;

  auto sum_opt = [&](std::optional<NodeId> x, std::optional<NodeId> y) -> std::optional<NodeId> {
    if (x && y) return add(*x, *y);
    return x ? x : y;
  };

  for (std::size_t i = 0; i < n_orig; ++i) {
    const NodeId self{static_cast<std::uint32_t>(i)};
    if (self == wrt) {
      tan[i] = direction;
      continue;
    }
    // Copy: push() may reallocate nodes_.
    const Node nd = nodes_[i];
    auto t = [&](std::size_t k) { return tan[nd.inputs[k].index]; };
    auto in = [&](std::size_t k) { return nd.inputs[k]; };
    bool any = false;
    for (auto x : nd.inputs) any = any || tan[x.index].has_value();
    if (!any) continue;

    std::optional<NodeId> r;
    switch (nd.op) {
      case Op::Input:
      case Op::Constant:
      case Op::Zeros:
        break;
      case Op::Add:
        r = sum_opt(t(0), t(1));
        break;
      case Op::Sub:
        if (t(0) && t(1)) r = sub(*t(0), *t(1));
        else if (t(0)) r = t(0);
        else r = neg(*t(1));
        break;
      case Op::Neg:
        r = neg(*t(0));
        break;
      case Op::Scale:
        r = scale(*t(0), nd.scalar);
        break;
      case Op::Mul: {
        std::optional<NodeId> p, q;
        if (t(0)) p = mul(*t(0), in(1));
        if (t(1)) q = mul(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
      case Op::MulScalar: {
        std::optional<NodeId> p, q;
        if (t(0)) p = mul_scalar(*t(0), in(1));
        if (t(1)) q = mul_scalar(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
      case Op::MatMul: {
        std::optional<NodeId> p, q;
        if (t(0)) p = matmul(*t(0), in(1));
        if (t(1)) q = matmul(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
      case Op::MatMulNT: {
        std::optional<NodeId> p, q;
        if (t(0)) p = matmul_nt(*t(0), in(1));
        if (t(1)) q = matmul_nt(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
      case Op::AddRow:
        if (t(0) && t(1)) r = add_row(*t(0), *t(1));
        else if (t(0)) r = t(0);
        else r = add_row(zeros(in(0)), *t(1));
        break;
      case Op::Tanh:
        r = mul(tanh_deriv(self), *t(0));
        break;
      case Op::Sigmoid:
        r = mul(sigmoid_deriv(self), *t(0));
        break;
      case Op::TanhDeriv:
        r = scale(mul(in(0), *t(0)), -2.0);
        break;
      case Op::SigmoidDeriv:
        r = sub(*t(0), scale(mul(in(0), *t(0)), 2.0));
        break;
      case Op::ConcatCols: {
        std::vector<NodeId> parts;
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) parts.push_back(t(k) ? *t(k) : zeros(in(k)));
        r = concat_cols(std::move(parts));
        break;
      }
      case Op::SliceCols:
        r = slice_cols(*t(0), nd.a, nd.b);
        break;
      case Op::Reshape:
        r = reshape(*t(0), nd.a, nd.b);
        break;
      case Op::Sum:
        r = sum(*t(0));
        break;
      case Op::Mean:
        r = mean(*t(0));
        break;
      case Op::SquaredNorm:
        r = scale(sum(mul(in(0), *t(0))), 2.0);
        break;
      case Op::RowBlockDot: {
        std::optional<NodeId> p, q;
        if (t(0)) p = row_block_dot(*t(0), in(1));
        if (t(1)) q = row_block_dot(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
      case Op::RowBlockCombine: {
        std::optional<NodeId> p, q;
        if (t(0)) p = row_block_combine(*t(0), in(1));
        if (t(1)) q = row_block_combine(in(0), *t(1));
        r = sum_opt(p, q);
        break;
      }
    }
    tan[i] = r;
  }

  NodeId result = tan[output.index] ? *tan[output.index] : zeros(output);
  emitting_jvp_ = false;
  return result;
}

// ---------------------------------------------------------------------------
// Bindings / Tape

void Bindings::bind(const std::string& name, const Tensor& value) {
  owned_.erase(name);
  refs_[name] = &value;
}

void Bindings::bind_all(const TensorMap& values) {
  for (const auto& [name, t] : values) bind(name, t);
}

void Bindings::set(const std::string& name, Tensor value) {
  auto& slot = owned_[name];
  slot = std::move(value);
  refs_[name] = &slot;
}

const Tensor* Bindings::find(const std::string& name) const {
  auto it = refs_.find(name);
  return it == refs_.end() ? nullptr : it->second;
}

const Tensor& Tape::value(NodeId id) const {
  if (!computed(id)) throw ShapeError("node " + std::to_string(id.index) + " was not evaluated");
  return *view_[id.index];
}

bool Tape::computed(NodeId id) const { return id.index < view_.size() && view_[id.index]; }

// ---------------------------------------------------------------------------
// Evaluation

namespace {

[[noreturn]] void shape_fail(const Graph& g, std::size_t i, const std::string& what) {
  std::ostringstream os;
  os << "node " << i << " (" << op_name(g.node(NodeId{static_cast<std::uint32_t>(i)}).op)
     << "): " << what;
  throw ShapeError(os.str());
}

std::string dims(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void require_same(const Graph& g, std::size_t i, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_fail(g, i, "operand shapes " + dims(a) + " and " + dims(b) + " differ");
  }
}

Tensor mat2(Matrix m) { return Tensor::from_matrix(std::move(m)); }

std::vector<char> live_mask(const Graph& g, std::span<const NodeId> targets) {
  std::vector<char> live(g.size(), 0);
  std::size_t top = 0;
  for (auto t : targets) {
    if (t.index >= g.size()) throw ShapeError("target node out of range");
    live[t.index] = 1;
    top = std::max<std::size_t>(top, t.index);
  }
  for (std::size_t i = top + 1; i-- > 0;) {
    if (!live[i]) continue;
    for (auto in : g.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) live[in.index] = 1;
  }
  return live;
}

}  // namespace

Tape forward(const Graph& g, const Bindings& bindings, std::span<const NodeId> targets) {
  Tape tape;
  const auto live = live_mask(g, targets);
  tape.view_.assign(g.size(), nullptr);
  tape.owned_.resize(g.size());

  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!live[i]) continue;
    const auto& nd = g.node(NodeId{static_cast<std::uint32_t>(i)});
    auto v = [&](std::size_t k) -> const Tensor& { return *tape.view_[nd.inputs[k].index]; };
    auto m = [&](std::size_t k) -> const Matrix& { return v(k).mat(); };
    Tensor out;
    switch (nd.op) {
      case Op::Input: {
        const Tensor* bound = bindings.find(nd.name);
        if (!bound) shape_fail(g, i, "unbound leaf '" + nd.name + "'");
        if (!bound->all_finite()) {
          throw NumericalError("non-finite value bound to leaf '" + nd.name + "'");
        }
        tape.view_[i] = bound;
        continue;
      }
      case Op::Constant:
        tape.view_[i] = nd.constant.get();
        continue;
      case Op::Zeros: {
        const std::size_t cols = nd.b ? nd.a : v(0).cols();
        out = mat2(Matrix::Zero(v(0).rows(), cols));
        break;
      }
      case Op::Add:
        require_same(g, i, v(0), v(1));
        out = Tensor(v(0).shape(), m(0) + m(1));
        break;
      case Op::Sub:
        require_same(g, i, v(0), v(1));
        out = Tensor(v(0).shape(), m(0) - m(1));
        break;
      case Op::Neg:
        out = Tensor(v(0).shape(), -m(0));
        break;
      case Op::Scale:
        out = Tensor(v(0).shape(), nd.scalar * m(0));
        break;
      case Op::Mul:
        require_same(g, i, v(0), v(1));
        out = Tensor(v(0).shape(), m(0).cwiseProduct(m(1)));
        break;
      case Op::MulScalar:
        if (v(1).size() != 1) shape_fail(g, i, "scalar operand has shape " + dims(v(1)));
        out = Tensor(v(0).shape(), m(1)(0, 0) * m(0));
        break;
      case Op::MatMul:
        if (v(0).cols() != v(1).rows()) shape_fail(g, i, dims(v(0)) + " * " + dims(v(1)));
        out = mat2(m(0) * m(1));
        break;
      case Op::MatMulNT:
        if (v(0).cols() != v(1).cols()) shape_fail(g, i, dims(v(0)) + " * (" + dims(v(1)) + ")^T");
        out = mat2(m(0) * m(1).transpose());
        break;
      case Op::AddRow:
        if (v(1).rows() != 1 || v(1).cols() != v(0).cols()) {
          shape_fail(g, i, "row " + dims(v(1)) + " added to " + dims(v(0)));
        }
        out = Tensor(v(0).shape(), m(0).rowwise() + m(1).row(0));
        break;
      case Op::Tanh:
        out = Tensor(v(0).shape(), tanh_of(m(0)));
        break;
      case Op::Sigmoid:
        out = Tensor(v(0).shape(), sigmoid_of(m(0)));
        break;
      case Op::TanhDeriv:
        out = Tensor(v(0).shape(), Matrix(1.0 - m(0).array().square()));
        break;
      case Op::SigmoidDeriv:
        out = Tensor(v(0).shape(), Matrix(m(0).array() - m(0).array().square()));
        break;
      case Op::ConcatCols: {
        const auto rows = v(0).rows();
        std::size_t cols = 0;
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
          if (v(k).rows() != rows) shape_fail(g, i, "row counts differ in concatenation");
          cols += v(k).cols();
        }
        Matrix r(rows, cols);
        Eigen::Index c0 = 0;
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
          r.middleCols(c0, m(k).cols()) = m(k);
          c0 += m(k).cols();
        }
        out = mat2(std::move(r));
        break;
      }
      case Op::SliceCols:
        if (nd.a + nd.b > v(0).cols()) shape_fail(g, i, "slice past " + dims(v(0)));
        out = mat2(m(0).middleCols(static_cast<Eigen::Index>(nd.a), static_cast<Eigen::Index>(nd.b)));
        break;
      case Op::Reshape:
        if (nd.a * nd.b != v(0).size()) {
          shape_fail(g, i, "cannot reshape " + dims(v(0)) + " to " + std::to_string(nd.a) + "x" +
                               std::to_string(nd.b));
        }
        out = Tensor(Shape{nd.a, nd.b}, v(0).values());
        break;
      case Op::Sum:
        out = Tensor::scalar(m(0).sum());
        break;
      case Op::Mean:
        if (v(0).size() == 0) shape_fail(g, i, "mean of empty tensor");
        out = Tensor::scalar(m(0).mean());
        break;
      case Op::SquaredNorm:
        out = Tensor::scalar(m(0).squaredNorm());
        break;
      case Op::RowBlockDot: {
        const auto& q = m(0);
        const auto& h = m(1);
        if (q.rows() != h.rows() || h.cols() == 0 || q.cols() % h.cols() != 0) {
          shape_fail(g, i, "block dot of " + dims(v(0)) + " with " + dims(v(1)));
        }
        const Eigen::Index k = h.cols(), r = q.cols() / k;
        Matrix res(q.rows(), r);
        for (Eigen::Index n = 0; n < q.rows(); ++n)
          for (Eigen::Index j = 0; j < r; ++j) res(n, j) = q.row(n).segment(j * k, k).dot(h.row(n));
        out = mat2(std::move(res));
        break;
      }
      case Op::RowBlockCombine: {
        const auto& p = m(0);
        const auto& f = m(1);
        if (p.rows() != f.rows() || p.cols() == 0 || f.cols() % p.cols() != 0) {
          shape_fail(g, i, "block combine of " + dims(v(0)) + " with " + dims(v(1)));
        }
        const Eigen::Index r = p.cols(), d = f.cols() / r;
        Matrix res = Matrix::Zero(p.rows(), d);
        for (Eigen::Index n = 0; n < p.rows(); ++n)
          for (Eigen::Index j = 0; j < r; ++j) res.row(n) += p(n, j) * f.row(n).segment(j * d, d);
        out = mat2(std::move(res));
        break;
      }
    }
    if (!out.all_finite()) {
      throw NumericalError("non-finite value produced at node " + std::to_string(i) + " (" +
                           std::string(op_name(nd.op)) + ")");
    }
    tape.owned_[i] = std::move(out);
    tape.view_[i] = &tape.owned_[i];
  }
  return tape;
}

Tensor evaluate(const Graph& graph, const Bindings& bindings) {
  return evaluate(graph, bindings, graph.output());
}

Tensor evaluate(const Graph& graph, const Bindings& bindings, NodeId target) {
  const NodeId targets[] = {target};
  auto tape = forward(graph, bindings, targets);
  return tape.value(target);
}

// ---------------------------------------------------------------------------
// Reverse mode

GradientResult gradient(const Graph& g, const Bindings& bindings, std::span<const std::string> wrt,
                        std::span<const NodeId> report) {
  const NodeId out = g.output();
  std::vector<NodeId> targets{out};
  targets.insert(targets.end(), report.begin(), report.end());
  auto tape = forward(g, bindings, targets);
  const Tensor& y = tape.value(out);
  if (y.size() != 1) throw ShapeError("gradient() needs a scalar output, got " + dims(y));

  const std::size_t n = out.index + 1;
  std::vector<char> needs(n, 0);
  for (const auto& name : wrt) {
    auto id = g.find_input(name);
    if (!id) throw ShapeError("gradient requested for unknown leaf '" + name + "'");
    if (id->index < n) needs[id->index] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (needs[i]) continue;
    for (auto in : g.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) {
      if (needs[in.index]) {
        needs[i] = 1;
        break;
      }
    }
  }

  std::vector<Matrix> grad(n);
  std::vector<char> has(n, 0);
  auto acc = [&](NodeId id, const auto& expr) {
    if (!needs[id.index]) return;
    if (has[id.index]) {
      grad[id.index] += expr;
    } else {
      grad[id.index] = expr;
      has[id.index] = 1;
    }
  };
  if (needs[out.index]) {
    grad[out.index] = Matrix::Ones(1, 1);
    has[out.index] = 1;
  }

  for (std::size_t i = n; i-- > 0;) {
    if (!has[i]) continue;
    const NodeId self{static_cast<std::uint32_t>(i)};
    const auto& nd = g.node(self);
    const Matrix& gy = grad[i];
    auto in = [&](std::size_t k) { return nd.inputs[k]; };
    auto m = [&](std::size_t k) -> const Matrix& { return tape.value(nd.inputs[k]).mat(); };
    const Matrix& yv = tape.value(self).mat();
    switch (nd.op) {
      case Op::Input:
      case Op::Constant:
      case Op::Zeros:
        break;
      case Op::Add:
        acc(in(0), gy);
        acc(in(1), gy);
        break;
      case Op::Sub:
        acc(in(0), gy);
        acc(in(1), -gy);
        break;
      case Op::Neg:
        acc(in(0), -gy);
        break;
      case Op::Scale:
        acc(in(0), nd.scalar * gy);
        break;
      case Op::Mul:
        acc(in(0), gy.cwiseProduct(m(1)));
        acc(in(1), gy.cwiseProduct(m(0)));
        break;
      case Op::MulScalar:
        acc(in(0), m(1)(0, 0) * gy);
        if (needs[in(1).index]) {
          Matrix gs(m(1).rows(), m(1).cols());
          gs(0, 0) = gy.cwiseProduct(m(0)).sum();
          acc(in(1), gs);
        }
        break;
      case Op::MatMul:
        if (needs[in(0).index]) acc(in(0), Matrix(gy * m(1).transpose()));
        if (needs[in(1).index]) acc(in(1), Matrix(m(0).transpose() * gy));
        break;
      case Op::MatMulNT:
        if (needs[in(0).index]) acc(in(0), Matrix(gy * m(1)));
        if (needs[in(1).index]) acc(in(1), Matrix(gy.transpose() * m(0)));
        break;
      case Op::AddRow:
        acc(in(0), gy);
        if (needs[in(1).index]) {
          Matrix row = gy.colwise().sum();
          acc(in(1), row);
        }
        break;
      case Op::Tanh:
        acc(in(0), Matrix(gy.array() * (1.0 - yv.array().square())));
        break;
      case Op::Sigmoid:
        acc(in(0), Matrix(gy.array() * yv.array() * (1.0 - yv.array())));
        break;
      case Op::TanhDeriv:
        acc(in(0), Matrix(-2.0 * gy.array() * m(0).array()));
        break;
      case Op::SigmoidDeriv:
        acc(in(0), Matrix(gy.array() * (1.0 - 2.0 * m(0).array())));
        break;
      case Op::ConcatCols: {
        Eigen::Index c0 = 0;
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
          const auto w = m(k).cols();
          if (needs[in(k).index]) acc(in(k), Matrix(gy.middleCols(c0, w)));
          c0 += w;
        }
        break;
      }
      case Op::SliceCols: {
        if (!needs[in(0).index]) break;
        Matrix ga = Matrix::Zero(m(0).rows(), m(0).cols());
        ga.middleCols(static_cast<Eigen::Index>(nd.a), static_cast<Eigen::Index>(nd.b)) = gy;
        acc(in(0), ga);
        break;
      }
      case Op::Reshape: {
        Matrix ga = Eigen::Map<const Matrix>(gy.data(), m(0).rows(), m(0).cols());
        acc(in(0), ga);
        break;
      }
      case Op::Sum:
        acc(in(0), Matrix::Constant(m(0).rows(), m(0).cols(), gy(0, 0)));
        break;
      case Op::Mean:
        acc(in(0), Matrix::Constant(m(0).rows(), m(0).cols(),
                                    gy(0, 0) / static_cast<double>(m(0).size())));
        break;
      case Op::SquaredNorm:
        acc(in(0), Matrix(2.0 * gy(0, 0) * m(0)));
        break;
      case Op::RowBlockDot: {
        const auto& q = m(0);
        const auto& h = m(1);
        const Eigen::Index k = h.cols(), r = q.cols() / k;
        if (needs[in(0).index]) {
          Matrix gq(q.rows(), q.cols());
          for (Eigen::Index s = 0; s < q.rows(); ++s)
            for (Eigen::Index j = 0; j < r; ++j) gq.row(s).segment(j * k, k) = gy(s, j) * h.row(s);
          acc(in(0), gq);
        }
        if (needs[in(1).index]) {
          Matrix gh = Matrix::Zero(h.rows(), k);
          for (Eigen::Index s = 0; s < q.rows(); ++s)
            for (Eigen::Index j = 0; j < r; ++j) gh.row(s) += gy(s, j) * q.row(s).segment(j * k, k);
          acc(in(1), gh);
        }
        break;
      }
      case Op::RowBlockCombine: {
        const auto& p = m(0);
        const auto& f = m(1);
        const Eigen::Index r = p.cols(), d = f.cols() / r;
        if (needs[in(0).index]) {
          Matrix gp(p.rows(), r);
          for (Eigen::Index s = 0; s < p.rows(); ++s)
            for (Eigen::Index j = 0; j < r; ++j) gp(s, j) = f.row(s).segment(j * d, d).dot(gy.row(s));
          acc(in(0), gp);
        }
        if (needs[in(1).index]) {
          Matrix gf(f.rows(), f.cols());
          for (Eigen::Index s = 0; s < p.rows(); ++s)
            for (Eigen::Index j = 0; j < r; ++j) gf.row(s).segment(j * d, d) = p(s, j) * gy.row(s);
          acc(in(1), gf);
        }
        break;
      }
    }
  }

  GradientResult result;
  result.value = y.item();
  for (auto id : report) result.reported.push_back(tape.value(id)[0]);
  for (const auto& name : wrt) {
    const NodeId id = *g.find_input(name);
    const Tensor* leaf = bindings.find(name);
    const Shape shape = leaf ? leaf->shape() : Shape{};
    if (id.index < n && has[id.index]) {
      result.grads[name] = Tensor(shape, std::move(grad[id.index]));
    } else {
      result.grads[name] = leaf ? Tensor(shape) : Tensor::scalar(0.0);
    }
  }
  return result;
}

GradientResult gradient_through_jvp(const Graph& graph, const Bindings& bindings,
                                    std::span<const std::string> wrt, std::span<const NodeId> report) {
  if (!graph.contains_jvp()) {
    throw ShapeError("gradient_through_jvp on a graph without forward-mode nodes");
  }
  return gradient(graph, bindings, wrt, report);
}

Tensor jvp(const Graph& graph, const Bindings& bindings, const std::string& wrt,
           const Tensor& direction) {
  auto leaf = graph.find_input(wrt);
  if (!leaf) throw ShapeError("jvp with respect to unknown leaf '" + wrt + "'");
  const Tensor* bound = bindings.find(wrt);
  if (!bound) throw ShapeError("jvp: leaf '" + wrt + "' is unbound");
  if (bound->shape() != direction.shape()) {
    throw ShapeError("jvp direction shape " + shape_string(direction.shape()) +
                     " differs from leaf shape " + shape_string(bound->shape()));
  }
  Graph g = graph;
  const std::string dir_name = "__jvp_direction__";
  const NodeId tangent = g.jvp(g.output(), *leaf, g.input(dir_name));
  Bindings b = bindings;
  b.bind(dir_name, direction);
  return evaluate(g, b, tangent);
}

}  // namespace kkl::ad

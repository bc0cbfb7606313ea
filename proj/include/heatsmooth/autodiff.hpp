#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is a tape: every primitive appends a node holding its value, so the
// insertion order is already a topological order and backward() is a single
// reverse sweep. Gradients flow to any node whose ancestry contains a leaf
// created with requires_grad; detach() cuts that ancestry. Graphs are meant to
// be rebuilt for every forward pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "heatsmooth/error.hpp"
#include "heatsmooth/tensor.hpp"

namespace heatsmooth::ad {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its Graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class Op : std::uint8_t {
  Leaf,
  Detach,
  MatMul,
  MatMulT,  // a * b^T
  Transpose,
  Add,
  Sub,
  Mul,
  AddRow,
  Scale,
  Relu,
  Tanh,
  Softmax,
  LogSoftmax,
  Sum,
  Mean,
  Square,
  Dot,
  L2NormSq,
  RowSum,
  RepeatRows,
  Reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Detach: return "detach";
    case Op::MatMul: return "matmul";
    case Op::MatMulT: return "matmul_transposed";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddRow: return "add_row";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Square: return "square";
    case Op::Dot: return "dot";
    case Op::L2NormSq: return "l2_norm_sq";
    case Op::RowSum: return "row_sum";
    case Op::RepeatRows: return "repeat_rows";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

// Adjoints produced by one backward sweep, addressable by any node that required grad.
class Gradients {
 public:
  bool has(Var v) const { return v.id < present_.size() && present_[v.id]; }
  const Tensor& at(Var v) const {
    if (!has(v)) throw InputError("Gradients::at: node has no gradient (requires_grad is false or it was detached)");
    return adj_[v.id];
  }

 private:
  friend class Graph;
  std::vector<Tensor> adj_;
  std::vector<bool> present_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves reject NaN/Inf.
  Var leaf(Tensor value, bool requires_grad = false) {
    if (!value.all_finite()) throw InputError("leaf: non-finite entry in tensor of shape " + shape_str(value.shape()));
    return push(Op::Leaf, {}, std::move(value), requires_grad);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Drops all stored values; the graph can no longer be evaluated or differentiated.
  void release() {
    nodes_.clear();
    nodes_.shrink_to_fit();
    freed_ = true;
  }

  Gradients backward(Var root) const;

 private:
  friend Var push_node(Graph&, Op, std::vector<std::size_t>, Tensor, double, std::size_t);

  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;      // Scale factor
    std::size_t count = 0;    // RepeatRows factor
  };

  void check(Var v) const {
    if (freed_) throw InputError("graph has been released");
    if (v.graph != this || v.id >= nodes_.size()) throw InputError("Var does not belong to this graph");
  }

  Var push(Op op, std::vector<std::size_t> inputs, Tensor value, bool leaf_grad = false,
           double scalar = 0.0, std::size_t count = 0) {
    if (freed_) throw InputError("graph has been released");
    bool rg = leaf_grad;
    if (op != Op::Leaf && op != Op::Detach)
      for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), rg, scalar, count});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool freed_ = false;
};

inline const Tensor& Var::value() const {
  if (graph == nullptr) throw InputError("Var is not bound to a graph");
  return graph->value(*this);
}

namespace detail {

inline Graph& same_graph(const char* op, Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph)
    throw InputError(std::string(op) + ": operands belong to different graphs");
  return *a.graph;
}

inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw InputError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Row-wise softmax of a rank-1 or rank-2 tensor with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double m = in[0];
    for (double v : in) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (out[j] = std::exp(in[j] - m));
    for (double& v : out) v /= z;
  }
  return y;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    double m = in[0];
    for (double v : in) m = std::max(m, v);
    double z = 0.0;
    for (double v : in) z += std::exp(v - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lz;
  }
  return y;
}

// c = a * b with a (m x k) and b (k x n) or b (k).
inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  Tensor c = b.rank() == 2 ? Tensor({m, n}) : Tensor({m});
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B.data() + p * n;
      double* crow = C.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  return c;
}

// c = a * b^T with a (m x k), b (n x k).
inline Tensor matmul_t_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = B.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * n + j] = s;
    }
  }
  return c;
}

inline Tensor transpose_values(const Tensor& a) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace detail

inline Var push_node(Graph& g, Op op, std::vector<std::size_t> inputs, Tensor value, double scalar = 0.0,
                     std::size_t count = 0) {
  return g.push(op, std::move(inputs), std::move(value), false, scalar, count);
}

// Identical value; contributes no gradient to anything upstream.
inline Var detach(Var a) {
  Graph& g = *a.graph;
  return push_node(g, Op::Detach, {a.id}, a.value());
}

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.dim(0) != A.dim(1) || B.rank() > 2) detail::shape_error("matmul", A.shape(), B.shape());
  return push_node(g, Op::MatMul, {a.id, b.id}, detail::matmul_values(A, B));
}

inline Var matmul_transposed(Var a, Var b) {
  Graph& g = detail::same_graph("matmul_transposed", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
    detail::shape_error("matmul_transposed", A.shape(), B.shape());
  return push_node(g, Op::MatMulT, {a.id, b.id}, detail::matmul_t_values(A, B));
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) throw InputError("transpose: expected a matrix, got shape " + shape_str(A.shape()));
  return push_node(*a.graph, Op::Transpose, {a.id}, detail::transpose_values(A));
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph("add", a, b);
  detail::require_same("add", a.value(), b.value());
  Tensor c = a.value();
  detail::add_into(c, b.value());
  return push_node(g, Op::Add, {a.id, b.id}, std::move(c));
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::same_graph("sub", a, b);
  detail::require_same("sub", a.value(), b.value());
  Tensor c = a.value();
  auto cd = c.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return push_node(g, Op::Sub, {a.id, b.id}, std::move(c));
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph("mul", a, b);
  detail::require_same("mul", a.value(), b.value());
  Tensor c = a.value();
  auto cd = c.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
  return push_node(g, Op::Mul, {a.id, b.id}, std::move(c));
}

// Adds the rank-1 `row` to every row of `a`.
inline Var add_row(Var a, Var row) {
  Graph& g = detail::same_graph("add_row", a, row);
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.rank() != 1 || R.size() != A.cols()) detail::shape_error("add_row", A.shape(), R.shape());
  Tensor c = A;
  for (std::size_t r = 0; r < c.rows(); ++r) {
    auto out = c.row(r);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += R[j];
  }
  return push_node(g, Op::AddRow, {a.id, row.id}, std::move(c));
}

inline Var scale(Var a, double s) {
  Tensor c = a.value();
  for (double& v : c.data()) v *= s;
  return push_node(*a.graph, Op::Scale, {a.id}, std::move(c), s);
}

inline Var relu(Var a) {
  Tensor c = a.value();
  for (double& v : c.data()) v = v > 0.0 ? v : 0.0;
  return push_node(*a.graph, Op::Relu, {a.id}, std::move(c));
}

inline Var tanh(Var a) {
  Tensor c = a.value();
  for (double& v : c.data()) v = std::tanh(v);
  return push_node(*a.graph, Op::Tanh, {a.id}, std::move(c));
}

// Softmax over the last axis (each row of a matrix, or the whole vector).
inline Var softmax(Var a) { return push_node(*a.graph, Op::Softmax, {a.id}, detail::softmax_rows(a.value())); }

inline Var log_softmax(Var a) {
  return push_node(*a.graph, Op::LogSoftmax, {a.id}, detail::log_softmax_rows(a.value()));
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return push_node(*a.graph, Op::Sum, {a.id}, Tensor::scalar(s));
}

inline Var mean(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return push_node(*a.graph, Op::Mean, {a.id}, Tensor::scalar(s / static_cast<double>(a.value().size())));
}

inline Var square(Var a) {
  Tensor c = a.value();
  for (double& v : c.data()) v *= v;
  return push_node(*a.graph, Op::Square, {a.id}, std::move(c));
}

inline Var dot(Var a, Var b) {
  Graph& g = detail::same_graph("dot", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 1 || A.shape() != B.shape()) detail::shape_error("dot", A.shape(), B.shape());
  return push_node(g, Op::Dot, {a.id, b.id}, Tensor::scalar(heatsmooth::dot(A.data(), B.data())));
}

inline Var l2_norm_sq(Var a) {
  const Tensor& A = a.value();
  return push_node(*a.graph, Op::L2NormSq, {a.id}, Tensor::scalar(heatsmooth::dot(A.data(), A.data())));
}

// Sums over the last axis: (m x n) -> (m); (n) -> (1).
inline Var row_sum(Var a) {
  const Tensor& A = a.value();
  Tensor c({A.rank() == 2 ? A.rows() : std::size_t{1}});
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double s = 0.0;
    for (double v : A.row(r)) s += v;
    c[r] = s;
  }
  return push_node(*a.graph, Op::RowSum, {a.id}, std::move(c));
}

inline Var repeat_rows(Var a, std::size_t k) {
  if (k == 0) throw InputError("repeat_rows: factor must be positive");
  return push_node(*a.graph, Op::RepeatRows, {a.id}, heatsmooth::repeat_rows(as_matrix(a.value()), k), 0.0, k);
}

inline Var reshape(Var a, Shape s) {
  if (shape_numel(s) != a.value().size()) detail::shape_error("reshape", a.value().shape(), s);
  return push_node(*a.graph, Op::Reshape, {a.id}, a.value().reshaped(std::move(s)));
}

inline Gradients Graph::backward(Var root) const {
  if (freed_) throw InputError("backward: graph has been released");
  check(root);
  const Tensor& rv = nodes_[root.id].value;
  if (rv.size() != 1) throw InputError("backward: root must be scalar, got shape " + shape_str(rv.shape()));

  Gradients grads;
  const std::size_t n = root.id + 1;
  grads.adj_.resize(n);
  grads.present_.assign(n, false);
  auto& adj = grads.adj_;
  auto& present = grads.present_;

  auto accumulate = [&](std::size_t id, Tensor t) {
    if (!nodes_[id].requires_grad) return;
    if (present[id]) {
      detail::add_into(adj[id], t);
    } else {
      adj[id] = std::move(t);
      present[id] = true;
    }
  };
  // Zero-initialised adjoint for an input, to be filled in place.
  auto slot = [&](std::size_t id) -> Tensor* {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!present[id]) {
      adj[id] = Tensor(nodes_[id].value.shape());
      present[id] = true;
    }
    return &adj[id];
  };

  if (!nodes_[root.id].requires_grad) return grads;
  adj[root.id] = Tensor(rv.shape(), 1.0);
  present[root.id] = true;

  for (std::size_t id = n; id-- > 0;) {
    if (!present[id]) continue;
    const Node& node = nodes_[id];
    const Tensor& g = adj[id];
    const auto& in = node.inputs;
    switch (node.op) {
      case Op::Leaf:
      case Op::Detach:
        break;
      case Op::MatMul: {
        const Tensor& A = nodes_[in[0]].value;
        const Tensor& B = nodes_[in[1]].value;
        const std::size_t m = A.dim(0), k = A.dim(1), ncol = B.rank() == 2 ? B.dim(1) : 1;
        if (Tensor* dA = slot(in[0])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < ncol; ++j) s += g[i * ncol + j] * B[p * ncol + j];
              (*dA)[i * k + p] += s;
            }
        }
        if (Tensor* dB = slot(in[1])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double a = A[i * k + p];
              for (std::size_t j = 0; j < ncol; ++j) (*dB)[p * ncol + j] += a * g[i * ncol + j];
            }
        }
        break;
      }
      case Op::MatMulT: {
        const Tensor& A = nodes_[in[0]].value;
        const Tensor& B = nodes_[in[1]].value;
        const std::size_t m = A.dim(0), k = A.dim(1), ncol = B.dim(0);
        if (Tensor* dA = slot(in[0])) {
          for (std::size_t i = 0; i < m; ++i) {
            double* arow = dA->data().data() + i * k;
            for (std::size_t j = 0; j < ncol; ++j) {
              const double gij = g[i * ncol + j];
              if (gij == 0.0) continue;
              const double* brow = B.data().data() + j * k;
              for (std::size_t p = 0; p < k; ++p) arow[p] += gij * brow[p];
            }
          }
        }
        if (Tensor* dB = slot(in[1])) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* arow = A.data().data() + i * k;
            for (std::size_t j = 0; j < ncol; ++j) {
              const double gij = g[i * ncol + j];
              if (gij == 0.0) continue;
              double* brow = dB->data().data() + j * k;
              for (std::size_t p = 0; p < k; ++p) brow[p] += gij * arow[p];
            }
          }
        }
        break;
      }
      case Op::Transpose:
        accumulate(in[0], detail::transpose_values(g));
        break;
      case Op::Add:
        accumulate(in[0], g);
        accumulate(in[1], g);
        break;
      case Op::Sub: {
        accumulate(in[0], g);
        Tensor neg = g;
        for (double& v : neg.data()) v = -v;
        accumulate(in[1], std::move(neg));
        break;
      }
      case Op::Mul: {
        const Tensor& A = nodes_[in[0]].value;
        const Tensor& B = nodes_[in[1]].value;
        if (nodes_[in[0]].requires_grad) {
          Tensor d = g;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] *= B[i];
          accumulate(in[0], std::move(d));
        }
        if (nodes_[in[1]].requires_grad) {
          Tensor d = g;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] *= A[i];
          accumulate(in[1], std::move(d));
        }
        break;
      }
      case Op::AddRow: {
        accumulate(in[0], g);
        if (Tensor* dr = slot(in[1])) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto gr = g.row(r);
            for (std::size_t j = 0; j < gr.size(); ++j) (*dr)[j] += gr[j];
          }
        }
        break;
      }
      case Op::Scale: {
        Tensor d = g;
        for (double& v : d.data()) v *= node.scalar;
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Relu: {
        // Subgradient 0 at the kink.
        const Tensor& X = nodes_[in[0]].value;
        Tensor d = g;
        for (std::size_t i = 0; i < d.size(); ++i)
          if (!(X[i] > 0.0)) d[i] = 0.0;
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Tanh: {
        const Tensor& Y = node.value;
        Tensor d = g;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - Y[i] * Y[i];
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Softmax: {
        const Tensor& Y = node.value;
        Tensor d(Y.shape());
        for (std::size_t r = 0; r < Y.rows(); ++r) {
          auto y = Y.row(r);
          auto gr = g.row(r);
          auto dr = d.row(r);
          const double s = heatsmooth::dot(y, gr);
          for (std::size_t j = 0; j < y.size(); ++j) dr[j] = y[j] * (gr[j] - s);
        }
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::LogSoftmax: {
        const Tensor& Y = node.value;
        Tensor d(Y.shape());
        for (std::size_t r = 0; r < Y.rows(); ++r) {
          auto y = Y.row(r);
          auto gr = g.row(r);
          auto dr = d.row(r);
          double s = 0.0;
          for (double v : gr) s += v;
          for (std::size_t j = 0; j < y.size(); ++j) dr[j] = gr[j] - std::exp(y[j]) * s;
        }
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Sum:
        accumulate(in[0], Tensor(nodes_[in[0]].value.shape(), g[0]));
        break;
      case Op::Mean: {
        const Tensor& X = nodes_[in[0]].value;
        accumulate(in[0], Tensor(X.shape(), g[0] / static_cast<double>(X.size())));
        break;
      }
      case Op::Square: {
        const Tensor& X = nodes_[in[0]].value;
        Tensor d = g;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 2.0 * X[i];
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Dot: {
        const Tensor& A = nodes_[in[0]].value;
        const Tensor& B = nodes_[in[1]].value;
        if (nodes_[in[0]].requires_grad) {
          Tensor d = B;
          for (double& v : d.data()) v *= g[0];
          accumulate(in[0], std::move(d));
        }
        if (nodes_[in[1]].requires_grad) {
          Tensor d = A;
          for (double& v : d.data()) v *= g[0];
          accumulate(in[1], std::move(d));
        }
        break;
      }
      case Op::L2NormSq: {
        Tensor d = nodes_[in[0]].value;
        for (double& v : d.data()) v *= 2.0 * g[0];
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::RowSum: {
        const Tensor& X = nodes_[in[0]].value;
        Tensor d(X.shape());
        for (std::size_t r = 0; r < X.rows(); ++r)
          for (double& v : d.row(r)) v = g[r];
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::RepeatRows: {
        const Tensor& X = nodes_[in[0]].value;
        const std::size_t k = node.count;
        Tensor d(X.shape());
        const std::size_t c = X.cols();
        for (std::size_t r = 0; r < X.rows(); ++r)
          for (std::size_t j = 0; j < k; ++j) {
            auto gr = g.row(r * k + j);
            for (std::size_t q = 0; q < c; ++q) d[r * c + q] += gr[q];
          }
        accumulate(in[0], std::move(d));
        break;
      }
      case Op::Reshape:
        accumulate(in[0], g.reshaped(nodes_[in[0]].value.shape()));
        break;
    }
  }
  return grads;
}

}  // namespace heatsmooth::ad

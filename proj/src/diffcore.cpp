#include "flowsfm/diffcore.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace flowsfm::ad {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Softplus: return "softplus";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Relu: return "relu";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Svd3: return "svd3";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tensor

Graph& Tensor::graph() const {
  if (!graph_) throw ShapeError("tensor is not attached to a graph");
  return *graph_;
}
const Shape& Tensor::shape() const { return graph().nodes_[id_].shape; }
Index Tensor::numel() const { return graph().nodes_[id_].value.size(); }
Index Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) throw ShapeError("rows() on tensor of shape " + to_string(s));
  return s[0];
}
Index Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) throw ShapeError("cols() on tensor of shape " + to_string(s));
  return s[1];
}
const Array& Tensor::value() const { return graph().nodes_[id_].value; }
double Tensor::item() const {
  const Array& v = value();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return v[0];
}
bool Tensor::requires_grad() const { return graph().nodes_[id_].requires_grad; }
Eigen::Map<const RowMatrix> Tensor::matrix() const {
  const Array& v = value();
  return {v.data(), rows(), cols()};
}

const Array& GradientMap::operator[](const Tensor& leaf) const {
  if (leaf.id() < grads_.size() && grads_[leaf.id()].size() > 0) return grads_[leaf.id()];
  if (leaf.id() < zeros_.size() && zeros_[leaf.id()].size() > 0) return zeros_[leaf.id()];
  throw ShapeError("gradient requested for a tensor that is not a leaf of this graph");
}

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::constant(Array values, Shape shape) {
  if (values.size() != numel(shape)) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  }
  Node n;
  n.op = "constant";
  n.shape = std::move(shape);
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Graph::constant(double value) { return constant(Array::Constant(1, value), Shape{}); }

Tensor Graph::leaf(Array values, Shape shape) {
  Tensor t = constant(std::move(values), std::move(shape));
  nodes_[t.id()].op = "leaf";
  nodes_[t.id()].requires_grad = true;
  nodes_[t.id()].is_leaf = true;
  return t;
}

Tensor Graph::make_node(const char* op, Array value, Shape shape, std::vector<std::size_t> inputs,
                        BackwardFn backward) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Graph::accumulate(std::size_t id, const Array& delta) { accumulate_expr(id, delta); }

GradientMap Graph::backward(const Tensor& loss) {
  if (&loss.graph() != this) throw ShapeError("backward: loss belongs to another graph");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  for (auto& n : nodes_) n.grad.resize(0);
  if (nodes_[loss.id()].requires_grad) nodes_[loss.id()].grad = Array::Ones(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, id);
  }
  GradientMap out;
  out.grads_.resize(nodes_.size());
  out.zeros_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.is_leaf) continue;
    if (n.grad.size() > 0) {
      out.grads_[id] = std::move(n.grad);
    } else {
      out.zeros_[id] = Array::Zero(n.value.size());
    }
  }
  return out;
}

namespace {

void check_same_graph(const Tensor& a, const Tensor& b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw ShapeError(std::string(op) + ": operands belong to different graphs");
  }
}

struct Dims2 {
  Index rows;
  Index cols;
};

Dims2 as2d(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  return {1, numel(s)};
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  const Index na = numel(a);
  const Index nb = numel(b);
  if (na == 1 && nb == 1) return a.size() >= b.size() ? a : b;
  if (na == 1) return b;
  if (nb == 1) return a;
  if (a.size() == b.size() && a.size() <= 2) {
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == b[i] || b[i] == 1) {
        out[i] = a[i];
      } else if (a[i] == 1) {
        out[i] = b[i];
      } else {
        throw ShapeError(std::string(op) + ": cannot broadcast shapes " + to_string(a) + " and " +
                         to_string(b));
      }
    }
    return out;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast shapes " + to_string(a) + " and " +
                   to_string(b));
}

Array expand(const Array& v, const Shape& in, const Shape& out) {
  if (in == out) return v;
  const Index n = numel(out);
  if (v.size() == 1) return Array::Constant(n, v[0]);
  const Dims2 di = as2d(in);
  const Dims2 dout = as2d(out);
  Eigen::Map<const RowMatrix> m(v.data(), di.rows, di.cols);
  RowMatrix r = m.replicate(dout.rows / di.rows, dout.cols / di.cols);
  return Eigen::Map<const Array>(r.data(), n);
}

Array reduce_to(const Array& g, const Shape& out, const Shape& in) {
  if (in == out) return g;
  if (numel(in) == 1) return Array::Constant(1, g.sum());
  const Dims2 di = as2d(in);
  const Dims2 dout = as2d(out);
  Eigen::Map<const RowMatrix> m(g.data(), dout.rows, dout.cols);
  RowMatrix r;
  if (di.rows == 1 && dout.rows > 1 && di.cols == dout.cols) {
    r = m.colwise().sum();
  } else if (di.cols == 1 && dout.cols > 1 && di.rows == dout.rows) {
    r = m.rowwise().sum();
  } else {
    r = m;
  }
  return Eigen::Map<const Array>(r.data(), r.size());
}

enum class Binary { Add, Sub, Mul, Div };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  check_same_graph(a, b, name);
  Graph& g = a.graph();
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  const Shape so = broadcast_shape(sa, sb, name);
  Array va = expand(a.value(), sa, so);
  Array vb = expand(b.value(), sb, so);
  Array out;
  switch (kind) {
    case Binary::Add: out = va + vb; break;
    case Binary::Sub: out = va - vb; break;
    case Binary::Mul: out = va * vb; break;
    case Binary::Div: out = va / vb; break;
  }
  auto backward = [kind, sa, sb, so](Graph& gr, std::size_t self) {
    const Array& go = gr.grad_of(self);
    const std::size_t ia = gr.input_of(self, 0);
    const std::size_t ib = gr.input_of(self, 1);
    switch (kind) {
      case Binary::Add:
        if (gr.requires_grad_of(ia)) gr.accumulate(ia, reduce_to(go, so, sa));
        if (gr.requires_grad_of(ib)) gr.accumulate(ib, reduce_to(go, so, sb));
        break;
      case Binary::Sub:
        if (gr.requires_grad_of(ia)) gr.accumulate(ia, reduce_to(go, so, sa));
        if (gr.requires_grad_of(ib)) gr.accumulate(ib, reduce_to(-go, so, sb));
        break;
      case Binary::Mul: {
        if (gr.requires_grad_of(ia)) {
          Array vb2 = expand(gr.value_of(ib), sb, so);
          gr.accumulate(ia, reduce_to(go * vb2, so, sa));
        }
        if (gr.requires_grad_of(ib)) {
          Array va2 = expand(gr.value_of(ia), sa, so);
          gr.accumulate(ib, reduce_to(go * va2, so, sb));
        }
        break;
      }
      case Binary::Div: {
        Array vb2 = expand(gr.value_of(ib), sb, so);
        if (gr.requires_grad_of(ia)) gr.accumulate(ia, reduce_to(go / vb2, so, sa));
        if (gr.requires_grad_of(ib)) {
          const Array& vo = gr.value_of(self);
          gr.accumulate(ib, reduce_to(-go * vo / vb2, so, sb));
        }
        break;
      }
    }
  };
  return g.make_node(name, std::move(out), so, {a.id(), b.id()}, backward);
}

// Unary element-wise op given its forward value and derivative (in terms of x and y).
template <typename Fwd, typename Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  Graph& g = a.graph();
  Array out = fwd(a.value());
  auto backward = [deriv](Graph& gr, std::size_t self) {
    const std::size_t ia = gr.input_of(self, 0);
    gr.accumulate(ia, gr.grad_of(self) * deriv(gr.value_of(ia), gr.value_of(self)));
  };
  return g.make_node(name, std::move(out), a.shape(), {a.id()}, backward);
}

Array stable_sigmoid(const Array& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Eigen::Matrix3d gap_factor(const Eigen::Vector3d& s) {
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double gap = s[j] * s[j] - s[i] * s[i];
      f(i, j) = gap / (gap * gap + kSvdGapEpsilon);
    }
  }
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// Element-wise ops

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Binary::Div, a, b); }

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](const Array& x) -> Array { return x * s; },
      [s](const Array& x, const Array&) -> Array { return Array::Constant(x.size(), s); });
}

Tensor shift(const Tensor& a, double s) {
  Graph& g = a.graph();
  auto backward = [](Graph& gr, std::size_t self) {
    gr.accumulate(gr.input_of(self, 0), gr.grad_of(self));
  };
  return g.make_node("shift", a.value() + s, a.shape(), {a.id()}, backward);
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](const Array& x) -> Array { return x.exp(); },
      [](const Array&, const Array& y) -> Array { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](const Array& x) -> Array { return x.log(); },
      [](const Array& x, const Array&) -> Array { return x.inverse(); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](const Array& x) -> Array {
        return x.unaryExpr([](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
      },
      [](const Array& x, const Array&) -> Array { return stable_sigmoid(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, [](const Array& x) -> Array { return stable_sigmoid(x); },
      [](const Array&, const Array& y) -> Array { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  auto backward = [](Graph& gr, std::size_t self) {
    const std::size_t ia = gr.input_of(self, 0);
    gr.accumulate_expr(ia, (gr.value_of(ia) > 0.0).select(gr.grad_of(self), 0.0));
  };
  return a.graph().make_node("relu", a.value().max(0.0), a.shape(), {a.id()}, backward);
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](const Array& x) -> Array { return x.sqrt(); },
      [](const Array&, const Array& y) -> Array { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](const Array& x) -> Array { return x.square(); },
      [](const Array& x, const Array&) -> Array { return 2.0 * x; });
}

Tensor sin(const Tensor& a) {
  return unary(
      "sin", a, [](const Array& x) -> Array { return x.sin(); },
      [](const Array& x, const Array&) -> Array { return x.cos(); });
}

Tensor cos(const Tensor& a) {
  return unary(
      "cos", a, [](const Array& x) -> Array { return x.cos(); },
      [](const Array& x, const Array&) -> Array { return -x.sin(); });
}

Tensor mul_const(const Tensor& a, const Array& c) {
  if (c.size() != a.numel()) {
    throw ShapeError("mul_const: " + std::to_string(c.size()) + " coefficients for shape " +
                     to_string(a.shape()));
  }
  Graph& g = a.graph();
  auto backward = [c](Graph& gr, std::size_t self) {
    gr.accumulate(gr.input_of(self, 0), gr.grad_of(self) * c);
  };
  return g.make_node("mul_const", a.value() * c, a.shape(), {a.id()}, backward);
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_same_graph(x, w, "affine");
  check_same_graph(x, b, "affine");
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.cols() != w.rows() || b.shape().size() != 2 ||
      b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine: incompatible shapes " + to_string(x.shape()) + ", " + to_string(w.shape()) + ", " +
                     to_string(b.shape()));
  }
  const Index m = x.rows();
  const Index k = x.cols();
  const Index n = w.cols();
  Array out(m * n);
  Eigen::Map<RowMatrix> o(out.data(), m, n);
  o.noalias() = x.matrix() * w.matrix();
  o.rowwise() += b.matrix().row(0);
  auto backward = [m, k, n](Graph& gr, std::size_t self) {
    const std::size_t ix = gr.input_of(self, 0);
    const std::size_t iw = gr.input_of(self, 1);
    const std::size_t ib = gr.input_of(self, 2);
    Eigen::Map<const RowMatrix> go(gr.grad_of(self).data(), m, n);
    if (gr.requires_grad_of(ix)) {
      Eigen::Map<const RowMatrix> vw(gr.value_of(iw).data(), k, n);
      Array gx(m * k);
      Eigen::Map<RowMatrix>(gx.data(), m, k).noalias() = go * vw.transpose();
      gr.accumulate(ix, gx);
    }
    if (gr.requires_grad_of(iw)) {
      Eigen::Map<const RowMatrix> vx(gr.value_of(ix).data(), m, k);
      Array gw(k * n);
      Eigen::Map<RowMatrix>(gw.data(), k, n).noalias() = vx.transpose() * go;
      gr.accumulate(iw, gw);
    }
    if (gr.requires_grad_of(ib)) {
      Array gb(n);
      Eigen::Map<RowMatrix>(gb.data(), 1, n) = go.colwise().sum();
      gr.accumulate(ib, gb);
    }
  };
  return x.graph().make_node("affine", std::move(out), Shape{m, n}, {x.id(), w.id(), b.id()}, backward);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_graph(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Index m = a.rows();
  const Index k = a.cols();
  const Index n = b.cols();
  Array out(m * n);
  Eigen::Map<RowMatrix>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  auto backward = [m, k, n](Graph& gr, std::size_t self) {
    const std::size_t ia = gr.input_of(self, 0);
    const std::size_t ib = gr.input_of(self, 1);
    Eigen::Map<const RowMatrix> go(gr.grad_of(self).data(), m, n);
    if (gr.requires_grad_of(ia)) {
      Eigen::Map<const RowMatrix> vb(gr.value_of(ib).data(), k, n);
      Array ga(m * k);
      Eigen::Map<RowMatrix>(ga.data(), m, k).noalias() = go * vb.transpose();
      gr.accumulate(ia, ga);
    }
    if (gr.requires_grad_of(ib)) {
      Eigen::Map<const RowMatrix> va(gr.value_of(ia).data(), m, k);
      Array gb(k * n);
      Eigen::Map<RowMatrix>(gb.data(), k, n).noalias() = va.transpose() * go;
      gr.accumulate(ib, gb);
    }
  };
  return a.graph().make_node("matmul", std::move(out), Shape{m, n}, {a.id(), b.id()}, backward);
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: needs rank 2, got " + to_string(a.shape()));
  const Index r = a.rows();
  const Index c = a.cols();
  Array out(r * c);
  Eigen::Map<RowMatrix>(out.data(), c, r) = a.matrix().transpose();
  auto backward = [r, c](Graph& gr, std::size_t self) {
    Eigen::Map<const RowMatrix> go(gr.grad_of(self).data(), c, r);
    Array gi(r * c);
    Eigen::Map<RowMatrix>(gi.data(), r, c) = go.transpose();
    gr.accumulate(gr.input_of(self, 0), gi);
  };
  return a.graph().make_node("transpose", std::move(out), Shape{c, r}, {a.id()}, backward);
}

Tensor sum(const Tensor& a) {
  const Index n = a.numel();
  auto backward = [n](Graph& gr, std::size_t self) {
    gr.accumulate(gr.input_of(self, 0), Array::Constant(n, gr.grad_of(self)[0]));
  };
  return a.graph().make_node("sum", Array::Constant(1, a.value().sum()), Shape{}, {a.id()},
                             backward);
}

Tensor mean(const Tensor& a) {
  const Index n = a.numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  auto backward = [n](Graph& gr, std::size_t self) {
    gr.accumulate(gr.input_of(self, 0),
                  Array::Constant(n, gr.grad_of(self)[0] / static_cast<double>(n)));
  };
  return a.graph().make_node("mean", Array::Constant(1, a.value().mean()), Shape{}, {a.id()},
                             backward);
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = parts[0].graph();
  const Shape& s0 = parts[0].shape();
  const std::size_t rank = s0.size();
  if (rank == 0 || rank > 2 || axis < 0 || static_cast<std::size_t>(axis) >= rank) {
    throw ShapeError("concat: unsupported axis " + std::to_string(axis) + " for shape " +
                     to_string(s0));
  }
  std::vector<std::size_t> ids;
  std::vector<Index> extents;
  Index total = 0;
  for (const Tensor& p : parts) {
    check_same_graph(parts[0], p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == rank;
    for (std::size_t d = 0; ok && d < rank; ++d) {
      if (static_cast<int>(d) != axis && s[d] != s0[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0) +
                       " along axis " + std::to_string(axis));
    }
    ids.push_back(p.id());
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const Index rows = rank == 2 ? out_shape[0] : 1;
  Array out(numel(out_shape));
  if (rank == 1 || axis == 0) {
    Index off = 0;
    for (const Tensor& p : parts) {
      out.segment(off, p.numel()) = p.value();
      off += p.numel();
    }
  } else {
    Eigen::Map<RowMatrix> om(out.data(), rows, total);
    Index off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      om.middleCols(off, extents[k]) = parts[k].matrix();
      off += extents[k];
    }
  }
  auto backward = [extents, rank, axis, rows, total](Graph& gr, std::size_t self) {
    const Array& go = gr.grad_of(self);
    Index off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t in = gr.input_of(self, k);
      if (rank == 1 || axis == 0) {
        const Index n = gr.value_of(in).size();
        if (gr.requires_grad_of(in)) gr.accumulate(in, go.segment(off, n));
        off += n;
      } else {
        if (gr.requires_grad_of(in)) {
          Eigen::Map<const RowMatrix> gm(go.data(), rows, total);
          RowMatrix part = gm.middleCols(off, extents[k]);
          gr.accumulate(in, Eigen::Map<const Array>(part.data(), part.size()));
        }
        off += extents[k];
      }
    }
  };
  return g.make_node("concat", std::move(out), out_shape, std::move(ids), backward);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  auto backward = [](Graph& gr, std::size_t self) {
    gr.accumulate(gr.input_of(self, 0), gr.grad_of(self));
  };
  return a.graph().make_node("reshape", a.value(), std::move(shape), {a.id()}, backward);
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
  if (a.shape().size() != 2 || begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for shape " +
                     to_string(a.shape()));
  }
  const Index r = a.rows();
  const Index c = a.cols();
  RowMatrix part = a.matrix().middleCols(begin, count);
  Array out = Eigen::Map<const Array>(part.data(), part.size());
  auto backward = [r, c, begin, count](Graph& gr, std::size_t self) {
    Array gi = Array::Zero(r * c);
    Eigen::Map<RowMatrix>(gi.data(), r, c).middleCols(begin, count) =
        Eigen::Map<const RowMatrix>(gr.grad_of(self).data(), r, count);
    gr.accumulate(gr.input_of(self, 0), gi);
  };
  return a.graph().make_node("slice_cols", std::move(out), Shape{r, count}, {a.id()}, backward);
}

Tensor gather(const Tensor& a, std::span<const Index> indices) {
  return gather(a, indices, Shape{static_cast<Index>(indices.size())});
}

Tensor gather(const Tensor& a, std::span<const Index> indices, Shape shape) {
  const Index n = a.numel();
  if (numel(shape) != static_cast<Index>(indices.size())) {
    throw ShapeError("gather: " + std::to_string(indices.size()) + " indices for result shape " +
                     to_string(shape));
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  Array out(static_cast<Index>(idx.size()));
  const Array& v = a.value();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= n) {
      throw ShapeError("gather: index " + std::to_string(idx[k]) + " out of range for shape " +
                       to_string(a.shape()));
    }
    out[static_cast<Index>(k)] = v[idx[k]];
  }
  auto backward = [idx = std::move(idx), n](Graph& gr, std::size_t self) {
    const Array& go = gr.grad_of(self);
    Array gi = Array::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) gi[idx[k]] += go[static_cast<Index>(k)];
    gr.accumulate(gr.input_of(self, 0), gi);
  };
  return a.graph().make_node("gather", std::move(out), std::move(shape), {a.id()}, backward);
}

Tensor grid_sample(const Tensor& image, const Tensor& coords) {
  check_same_graph(image, coords, "grid_sample");
  if (image.shape().size() != 2) {
    throw ShapeError("grid_sample: image must be rank 2, got " + to_string(image.shape()));
  }
  if (coords.shape().size() != 2 || coords.cols() != 2) {
    throw ShapeError("grid_sample: coords must be N x 2, got " + to_string(coords.shape()));
  }
  if (coords.requires_grad()) {
    throw ShapeError("grid_sample: gradients with respect to coordinates are not supported");
  }
  const Index h = image.rows();
  const Index w = image.cols();
  const Index n = coords.rows();
  auto xy = coords.matrix();
  // Four taps per sample.
  std::vector<Index> taps(static_cast<std::size_t>(4 * n));
  Array weights(4 * n);
  const Array& img = image.value();
  Array out(n);
  for (Index k = 0; k < n; ++k) {
    const double gx = std::clamp(xy(k, 0) - 0.5, 0.0, static_cast<double>(w - 1));
    const double gy = std::clamp(xy(k, 1) - 0.5, 0.0, static_cast<double>(h - 1));
    const Index x0 = std::min<Index>(static_cast<Index>(std::floor(gx)), std::max<Index>(w - 2, 0));
    const Index y0 = std::min<Index>(static_cast<Index>(std::floor(gy)), std::max<Index>(h - 2, 0));
    const Index x1 = std::min<Index>(x0 + 1, w - 1);
    const Index y1 = std::min<Index>(y0 + 1, h - 1);
    const double fx = gx - static_cast<double>(x0);
    const double fy = gy - static_cast<double>(y0);
    const Index base = 4 * k;
    taps[base + 0] = y0 * w + x0;
    taps[base + 1] = y0 * w + x1;
    taps[base + 2] = y1 * w + x0;
    taps[base + 3] = y1 * w + x1;
    weights[base + 0] = (1 - fx) * (1 - fy);
    weights[base + 1] = fx * (1 - fy);
    weights[base + 2] = (1 - fx) * fy;
    weights[base + 3] = fx * fy;
    double acc = 0.0;
    for (int t = 0; t < 4; ++t) acc += weights[base + t] * img[taps[base + t]];
    out[k] = acc;
  }
  auto backward = [taps = std::move(taps), weights, h, w](Graph& gr, std::size_t self) {
    const Array& go = gr.grad_of(self);
    Array gi = Array::Zero(h * w);
    for (Index k = 0; k < go.size(); ++k) {
      for (int t = 0; t < 4; ++t) gi[taps[4 * k + t]] += weights[4 * k + t] * go[k];
    }
    gr.accumulate(gr.input_of(self, 0), gi);
  };
  return image.graph().make_node("grid_sample", std::move(out), Shape{n, 1},
                                 {image.id(), coords.id()}, backward);
}

// ---------------------------------------------------------------------------
// SVD

Eigen::Matrix3d svd3_backward(const Eigen::Matrix3d& u, const Eigen::Vector3d& s,
                              const Eigen::Matrix3d& v, const Eigen::Matrix3d& grad_u,
                              const Eigen::Vector3d& grad_s, const Eigen::Matrix3d& grad_v) {
  if (!grad_u.allFinite() || !grad_s.allFinite() || !grad_v.allFinite()) {
    throw GradientError("svd3_backward: non-finite upstream gradient");
  }
  const Eigen::Matrix3d f = gap_factor(s);
  const Eigen::Matrix3d smat = s.asDiagonal();
  const Eigen::Matrix3d ju = f.cwiseProduct(u.transpose() * grad_u - grad_u.transpose() * u);
  const Eigen::Matrix3d jv = f.cwiseProduct(v.transpose() * grad_v - grad_v.transpose() * v);
  const Eigen::Matrix3d inner =
      ju * smat + Eigen::Matrix3d(grad_s.asDiagonal()) + smat * jv;
  return u * inner * v.transpose();
}

Tensor svd3(const Tensor& a) {
  if (a.shape() != Shape{3, 3}) throw ShapeError("svd3: expected [3,3], got " + to_string(a.shape()));
  const Eigen::Matrix3d m = a.matrix();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Vector3d s = svd.singularValues();
  const Eigen::Matrix3d v = svd.matrixV();
  Array out(21);
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.data()) = u;
  out.segment(9, 3) = s.array();
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.data() + 12) = v;
  auto backward = [u, s, v](Graph& gr, std::size_t self) {
    const Array& go = gr.grad_of(self);
    const Eigen::Matrix3d gu = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(go.data());
    const Eigen::Vector3d gs = go.segment(9, 3).matrix();
    const Eigen::Matrix3d gv =
        Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(go.data() + 12);
    const Eigen::Matrix3d ga = svd3_backward(u, s, v, gu, gs, gv);
    Array gi(9);
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(gi.data()) = ga;
    gr.accumulate(gr.input_of(self, 0), gi);
  };
  return a.graph().make_node("svd3", std::move(out), Shape{21}, {a.id()}, backward);
}

// ---------------------------------------------------------------------------
// Generic dispatch

Tensor Graph::record(OpKind kind, std::span<const Tensor> inputs) {
  const bool binary_op = kind == OpKind::Add || kind == OpKind::Sub || kind == OpKind::Mul ||
                         kind == OpKind::Div || kind == OpKind::MatMul;
  const std::size_t arity = binary_op ? 2 : 1;
  if (inputs.size() != arity) {
    throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(arity) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
  for (const Tensor& t : inputs) {
    if (&t.graph() != this) throw ShapeError(std::string(op_name(kind)) + ": foreign tensor");
  }
  switch (kind) {
    case OpKind::Add: return add(inputs[0], inputs[1]);
    case OpKind::Sub: return sub(inputs[0], inputs[1]);
    case OpKind::Mul: return mul(inputs[0], inputs[1]);
    case OpKind::Div: return div(inputs[0], inputs[1]);
    case OpKind::MatMul: return matmul(inputs[0], inputs[1]);
    case OpKind::Neg: return neg(inputs[0]);
    case OpKind::Exp: return exp(inputs[0]);
    case OpKind::Log: return log(inputs[0]);
    case OpKind::Softplus: return softplus(inputs[0]);
    case OpKind::Sigmoid: return sigmoid(inputs[0]);
    case OpKind::Relu: return relu(inputs[0]);
    case OpKind::Sqrt: return sqrt(inputs[0]);
    case OpKind::Square: return square(inputs[0]);
    case OpKind::Sin: return sin(inputs[0]);
    case OpKind::Cos: return cos(inputs[0]);
    case OpKind::Transpose: return transpose(inputs[0]);
    case OpKind::Sum: return sum(inputs[0]);
    case OpKind::Mean: return mean(inputs[0]);
    case OpKind::Svd3: return svd3(inputs[0]);
  }
  throw ShapeError("record: unknown op kind");
}

}  // namespace flowsfm::ad

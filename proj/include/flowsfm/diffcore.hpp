#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Graph records every operation of one forward evaluation (define-by-run).
// Tensors are lightweight handles into the graph; values live in the graph's
// node arena. Calling backward() on a scalar replays the recorded adjoints in
// reverse creation order, which is always a valid topological order.
//
// Broadcasting rules for the element-wise binary ops: operands of equal shape,
// or one operand with a single element, or two rank-equal operands whose
// extents are pairwise equal or 1 (rank <= 2).

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowsfm::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Thrown for shape mismatches and other misuse of the op set.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a backward rule receives non-finite adjoints.
class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind {
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Softplus,
  Sigmoid,
  Relu,
  Sqrt,
  Square,
  Sin,
  Cos,
  MatMul,
  Transpose,
  Sum,
  Mean,
  Svd3,
};

const char* op_name(OpKind kind);

class Graph;

class Tensor {
 public:
  Tensor() = default;

  [[nodiscard]] bool valid() const { return graph_ != nullptr; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] Graph& graph() const;
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] Index numel() const;
  [[nodiscard]] Index rows() const;  // rank-2 only
  [[nodiscard]] Index cols() const;  // rank-2 only
  [[nodiscard]] const Array& value() const;
  [[nodiscard]] double item() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Eigen::Map<const RowMatrix> matrix() const;

 private:
  friend class Graph;
  Tensor(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// A named, persistent optimization variable. Graphs see it as a leaf each step.
struct Parameter {
  std::string name;
  std::string group;
  Shape shape;
  Array value;
};

/// Gradients produced by Graph::backward, keyed by leaf tensor.
class GradientMap {
 public:
  /// Gradient for a leaf; zeros when the leaf did not influence the loss.
  [[nodiscard]] const Array& operator[](const Tensor& leaf) const;

 private:
  friend class Graph;
  std::vector<Array> grads_;  // indexed by node id, leaves only
  std::vector<Array> zeros_;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Tensor constant(Array values, Shape shape);
  Tensor constant(double value);
  Tensor leaf(Array values, Shape shape);

  /// Records a parameter-free op. Arity is checked per kind.
  Tensor record(OpKind kind, std::span<const Tensor> inputs);

  /// Reverse sweep from a scalar. Gradients accumulate additively across fan-out.
  GradientMap backward(const Tensor& loss);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Building blocks for op implementations.
  Tensor make_node(const char* op, Array value, Shape shape, std::vector<std::size_t> inputs,
                   BackwardFn backward);
  [[nodiscard]] const Array& value_of(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  [[nodiscard]] const Array& grad_of(std::size_t id) const { return nodes_[id].grad; }
  [[nodiscard]] bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t input_of(std::size_t id, std::size_t k) const {
    return nodes_[id].inputs[k];
  }
  void accumulate(std::size_t id, const Array& delta);
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr& delta) {
    auto& node = nodes_[id];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = delta;
    } else {
      node.grad += delta;
    }
  }
  Tensor handle(std::size_t id) { return Tensor(this, id); }

 private:
  struct Node {
    const char* op = "";
    Shape shape;
    Array value;
    Array grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  friend class Tensor;
  std::vector<Node> nodes_;
};

// Element-wise arithmetic with broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Arithmetic with plain scalars.
Tensor scale(const Tensor& a, double s);
Tensor shift(const Tensor& a, double s);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

/// Multiplies by a constant array of the same size (masks, fixed coefficients).
Tensor mul_const(const Tensor& a, const Array& c);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x [N,K] * w [K,M] + b [1,M] without materializing the broadcast bias.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Concatenates rank-1 tensors along axis 0, or rank-2 tensors along `axis`.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& a, Shape shape);
/// Columns [begin, begin + count) of a rank-2 tensor.
Tensor slice_cols(const Tensor& a, Index begin, Index count);
/// Flat gather; the result has shape {indices.size()}. Backward scatter-adds.
Tensor gather(const Tensor& a, std::span<const Index> indices);
/// Same as gather but with an explicit result shape.
Tensor gather(const Tensor& a, std::span<const Index> indices, Shape shape);

/// Bilinear sample of a rank-2 image at continuous pixel coordinates, where
/// pixel (r, c) has its centre at (x, y) = (c + 0.5, r + 0.5). Coordinates
/// outside the centre lattice clamp to the border. `coords` is an N x 2 constant
/// tensor of (x, y); gradients flow to the image only. Result shape {N, 1}.
Tensor grid_sample(const Tensor& image, const Tensor& coords);

/// Thin SVD of a 3x3 matrix: returns a 21-vector [U (row-major 9), S (3), V (9)]
/// with A = U diag(S) V^T and S sorted descending.
Tensor svd3(const Tensor& a);

/// Regularisation used for the singular-value gap terms of svd3's backward rule.
inline constexpr double kSvdGapEpsilon = 1e-10;

/// Backward rule for svd3, exposed for direct testing. Returns dL/dA (row-major 3x3).
Eigen::Matrix3d svd3_backward(const Eigen::Matrix3d& u, const Eigen::Vector3d& s,
                              const Eigen::Matrix3d& v, const Eigen::Matrix3d& grad_u,
                              const Eigen::Vector3d& grad_s, const Eigen::Matrix3d& grad_v);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return shift(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return shift(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return shift(a, -s); }

}  // namespace flowsfm::ad

#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// Every operation evaluates eagerly and, when any input requires a gradient,
// records its parents plus a backward closure on the result node. Calling
// backward() on a scalar walks that tape in reverse topological order and
// accumulates d(loss)/d(node) into each node that requires a gradient.
// Gradients accumulate; callers zero them between optimization steps.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tsfed {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Lazily allocates a zeroed gradient buffer matching `value`.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  // Direct write access; only meaningful on leaves (optimizer updates).
  std::span<double> mutable_values() { return node_->value; }
  double item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  // Fresh node with copied values and no history.
  Tensor detach(bool requires_grad = false) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Populates gradients of every requires_grad ancestor of `loss`.
// Throws ContractError unless loss holds exactly one element.
void backward(const Tensor& loss);

enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kMeanOverAxis,
  kSum,
  kSlice,
  kConcat,
  kMse,
  kTranspose,
  kReshape,
  kEmbeddingLookup,
  kCausalMask,
};

struct OpAttrs {
  double scalar = 0.0;
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  Shape shape;
  std::vector<std::size_t> indices;
  std::vector<double> row_weights;  // mse: optional per-row selection
  double eps = 1e-5;
};

// Generic dispatcher over the named operations below.
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

namespace ops {

// [m,k]x[k,n], [b,m,k]x[b,k,n] or [b,m,k]x[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Element-wise with NumPy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Along the last axis.
Tensor softmax(const Tensor& a);
// Normalizes over the last axis; gamma and beta have that axis' length.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// tanh approximation.
Tensor gelu(const Tensor& a);
// Removes `axis`.
Tensor mean(const Tensor& a, std::size_t axis);
// Scalar sum of every element.
Tensor sum(const Tensor& a);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Mean of squared differences. With `row_weights` (one entry per row, a row being
// the last axis), only rows with nonzero weight count and the mean is taken over
// the selected elements; an empty selection yields a constant 0.
Tensor mse(const Tensor& a, const Tensor& b, std::span<const double> row_weights = {});
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// Gathers rows of a [v,d] table.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);
// Sets entries above the diagonal of the trailing [t,t] block to -inf.
Tensor causal_mask(const Tensor& scores);

// Sum of squares, built from mul and sum.
Tensor sum_squares(const Tensor& a);

}  // namespace ops
}  // namespace tsfed

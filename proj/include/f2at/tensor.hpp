#pragma once
// Dense float64 tensors and a define-by-run reverse-mode differentiation tape.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace f2at {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  // Throws std::invalid_argument unless product(shape) == data.size().
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // The single value of a one-element tensor.
  double item() const;
  bool all_finite() const;

  // Same data, new shape of equal size.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{0};
  std::vector<double> data_;
};

enum class Primitive {
  kLeaf,
  kMatmul,
  kConv2d,
  kBiasAdd,
  kRelu,
  kMaxPool2,
  kFlatten,
  kSoftmaxCrossEntropy,
  kLogSumExp,
  kCosineSimilarity,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMean,
  kSign,
  kPick,
  kMaxReduce,
};

std::string_view primitive_name(Primitive kind);
// Throws std::invalid_argument for an unknown name.
Primitive parse_primitive(std::string_view name);

struct Attrs {
  std::size_t padding = 0;          // conv2d zero padding
  double factor = 1.0;              // scale
  std::vector<std::size_t> labels;  // softmax-cross-entropy, pick, log-sum-exp exclusion
  bool exclude_labels = false;      // log-sum-exp over every column except labels[row]
  bool pairwise = false;            // cosine: all row pairs (N x M) instead of aligned rows (N)
};

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

class Gradients;

// Append-only tape. Nodes are recorded in topological order by construction,
// and backward() walks them in exact reverse insertion order. A graph belongs
// to one thread at a time.
class Graph {
 public:
  NodeId input(Tensor value, bool requires_grad = true);
  NodeId constant(Tensor value) { return input(std::move(value), false); }

  // Records one primitive. Shape mismatches throw std::invalid_argument with a
  // message naming the primitive and the offending shapes.
  NodeId apply(Primitive kind, std::span<const NodeId> inputs, const Attrs& attrs = {});
  NodeId apply(Primitive kind, std::initializer_list<NodeId> inputs, const Attrs& attrs = {}) {
    return apply(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), attrs);
  }
  NodeId apply(std::string_view kind, std::span<const NodeId> inputs, const Attrs& attrs = {}) {
    return apply(parse_primitive(kind), inputs, attrs);
  }

  NodeId matmul(NodeId a, NodeId b) { return apply(Primitive::kMatmul, {a, b}); }
  NodeId conv2d(NodeId x, NodeId w, std::size_t padding);
  NodeId bias_add(NodeId x, NodeId b) { return apply(Primitive::kBiasAdd, {x, b}); }
  NodeId relu(NodeId x) { return apply(Primitive::kRelu, {x}); }
  NodeId max_pool2(NodeId x) { return apply(Primitive::kMaxPool2, {x}); }
  NodeId flatten(NodeId x) { return apply(Primitive::kFlatten, {x}); }
  // Per-row loss log-sum-exp(z) - z[label]; shape [N].
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);
  NodeId log_sum_exp(NodeId x) { return apply(Primitive::kLogSumExp, {x}); }
  NodeId log_sum_exp_excluding(NodeId x, std::vector<std::size_t> labels);
  NodeId cosine(NodeId a, NodeId b) { return apply(Primitive::kCosineSimilarity, {a, b}); }
  NodeId pairwise_cosine(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b) { return apply(Primitive::kAdd, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return apply(Primitive::kSub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return apply(Primitive::kMul, {a, b}); }
  NodeId scale(NodeId x, double factor);
  NodeId mean(NodeId x) { return apply(Primitive::kMean, {x}); }
  NodeId sign(NodeId x) { return apply(Primitive::kSign, {x}); }
  NodeId pick(NodeId x, std::vector<std::size_t> labels);
  NodeId max_reduce(NodeId x) { return apply(Primitive::kMaxReduce, {x}); }

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  Primitive kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id.index).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of a scalar root with respect to every node. Nodes the root does
  // not depend on (and constants) receive zeros of matching shape.
  Gradients backward(NodeId root) const;

 private:
  struct Node {
    Primitive kind = Primitive::kLeaf;
    std::vector<NodeId> inputs;
    Attrs attrs;
    Tensor value;
    bool requires_grad = false;
    // Forward context kept for the backward rule.
    std::vector<double> saved;
    std::vector<std::size_t> saved_index;
  };

  void check_id(NodeId id) const;
  void backward_node(const Node& node, const Tensor& grad, std::vector<Tensor>& grads,
                     std::vector<bool>& seen) const;

  std::vector<Node> nodes_;
};

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& operator[](NodeId id) const { return grads_.at(id.index); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  bool finite = true;
  std::string diagnostic;

  bool passed(double tolerance) const { return finite && max_relative_error <= tolerance; }
};

using GraphBuilder = std::function<NodeId(Graph&, NodeId)>;

// Compares backward() against central differences at `point`:
// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
GradCheckResult grad_check(const GraphBuilder& function, const Tensor& point, double step);

}  // namespace f2at

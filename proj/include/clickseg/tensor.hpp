#pragma once

#include <Eigen/Core>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clickseg/common.hpp"

namespace clickseg {

using ArrayXd = Eigen::ArrayXd;

/// Primitive kinds recorded on the tape. Every differentiable computation in
/// the project is a composition of these.
enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScalarMul,
  kMatMul,
  kConv2d,
  kRelu,
  kSigmoid,
  kSoftmax,        // last axis
  kLayerNorm,      // last axis, no affine
  kMean,           // axis or all
  kSum,            // axis or all
  kMax,            // axis or all
  kConcat,         // given axis
  kReshape,
  kTranspose,      // rank-2 only
  kUpsample2x,     // nearest, rank-3 (H, W, C)
  kGatherRows,     // axis-0 gather
  kLog,
};

const char* op_name(OpKind kind);

/// Static attributes of a primitive application.
struct OpAttrs {
  static constexpr int kAllAxes = -1;
  int axis = kAllAxes;          // reductions, softmax override, concat
  int stride = 1;               // conv2d: 1 or 2
  int pad = 0;                  // conv2d: zero padding on every side
  double scalar = 0.0;          // scalar-mul factor
  Shape target_shape;           // reshape
  std::vector<Index> indices;   // gather-rows
};

struct TensorNode {
  Shape shape;
  ArrayXd value;
  ArrayXd grad;                 // empty until backward touches it
  bool requires_grad = false;   // leaf flag
  bool needs_grad = false;      // requires_grad or any input needs it

  OpKind op = OpKind::kLeaf;
  OpAttrs attrs;
  std::vector<std::shared_ptr<TensorNode>> inputs;

  Index size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayXd::Zero(value.size());
  }
};

/// Value-semantic handle onto a node of the computation graph. Data is 64-bit
/// floating point, row-major. Copying a Tensor aliases the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double fill, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor from_array(const Shape& shape, ArrayXd data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }

  const ArrayXd& array() const { return node_->value; }
  ArrayXd& mutable_array() { return node_->value; }
  std::span<const double> values() const {
    return {node_->value.data(), static_cast<std::size_t>(node_->value.size())};
  }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double at(Index flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = node_->needs_grad || v;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const ArrayXd& grad() const { return node_->grad; }
  ArrayXd& mutable_grad() { return node_->grad; }
  void zero_grad() {
    node_->ensure_grad();
    node_->grad.setZero();
  }

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

}  // namespace clickseg

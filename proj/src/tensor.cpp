#include "clickseg/tensor.hpp"

namespace clickseg {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kScalarMul: return "scalar-mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer-norm";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kMax: return "max";
    case OpKind::kConcat: return "concat";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kUpsample2x: return "nearest-upsample-2x";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kLog: return "log";
  }
  return "?";
}

static std::shared_ptr<TensorNode> make_leaf(const Shape& shape, ArrayXd data,
                                             bool requires_grad) {
  if (data.size() != numel(shape))
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->needs_grad = requires_grad;
  return node;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_leaf(shape, ArrayXd::Zero(numel(shape)), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double fill, bool requires_grad) {
  return Tensor(make_leaf(shape, ArrayXd::Constant(numel(shape), fill), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  ArrayXd a = Eigen::Map<const ArrayXd>(data.data(), static_cast<Index>(data.size()));
  return Tensor(make_leaf(shape, std::move(a), requires_grad));
}

Tensor Tensor::from_array(const Shape& shape, ArrayXd data, bool requires_grad) {
  return Tensor(make_leaf(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(make_leaf({}, ArrayXd::Constant(1, v), requires_grad));
}

}  // namespace clickseg

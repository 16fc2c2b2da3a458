#include "clickseg/graph.hpp"

#include <stdexcept>

#include "op_backward.hpp"

namespace clickseg {

namespace {
thread_local Graph* g_current = nullptr;
thread_local bool g_fault_armed = false;
thread_local OpKind g_fault_kind = OpKind::kLeaf;
thread_local double g_fault_scale = 1.0;
}

Graph::Graph() {
  prev_ = g_current;
  g_current = this;
}

Graph::~Graph() {
  sever_links();
  g_current = prev_;
}

Graph* Graph::current() { return g_current; }

void Graph::record(const std::shared_ptr<TensorNode>& node) { tape_.push_back(node); }

void Graph::backward(const Tensor& output) {
  if (backward_done_)
    throw std::logic_error("backward called twice on the same graph without reset");
  if (output.size() != 1)
    throw ShapeError("backward requires a scalar output, got shape " +
                     shape_str(output.shape()));
  backward_done_ = true;

  output.node()->ensure_grad();
  output.node()->grad[0] += 1.0;

  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    TensorNode& node = **it;
    if (node.op == OpKind::kLeaf || !node.needs_grad) continue;
    if (node.grad.size() != node.value.size()) continue;  // not on the path to the output
    const double scale = (g_fault_armed && node.op == g_fault_kind) ? g_fault_scale : 1.0;
    detail::backprop_node(node, scale);
  }
}

void Graph::set_backward_fault(OpKind kind, double scale) {
  g_fault_armed = true;
  g_fault_kind = kind;
  g_fault_scale = scale;
}

void Graph::clear_backward_fault() {
  g_fault_armed = false;
  g_fault_kind = OpKind::kLeaf;
  g_fault_scale = 1.0;
}

void Graph::reset() {
  sever_links();
  tape_.clear();
  backward_done_ = false;
}

void Graph::sever_links() {
  // Break parent links so user-held output tensors do not keep whole
  // subgraphs alive after the tape is gone.
  for (auto& node : tape_) {
    node->inputs.clear();
    node->grad.resize(0);
  }
}

}  // namespace clickseg

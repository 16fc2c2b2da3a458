#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "clickseg/tensor.hpp"

namespace clickseg {

/// Dynamic tape of primitive applications, rebuilt per forward pass. While a
/// Graph is alive on a thread, every primitive records into it in insertion
/// order; backward replays the tape in exact reverse insertion order.
///
/// With no Graph active, primitives run eagerly and retain nothing, which is
/// what inference-without-training uses.
///
/// A graph and its tensors belong to one thread; no shared-mutation safety is
/// promised.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Active graph on this thread, or nullptr.
  static Graph* current();

  /// Reverse-mode sweep from a scalar output. Populates grad on every
  /// reachable requires_grad tensor; gradients accumulate additively across
  /// fan-out. Throws ShapeError on non-scalar output and std::logic_error if
  /// called twice without reset().
  void backward(const Tensor& output);

  /// Clears the tape (severing node input links) and re-arms backward.
  void reset();

  std::size_t size() const { return tape_.size(); }
  bool backward_done() const { return backward_done_; }

  void record(const std::shared_ptr<TensorNode>& node);

  /// Test hook: scales the input gradients produced by one op kind during any
  /// backward on this thread until cleared. Used by the gradient-checker
  /// negative controls (a corrupted backward must be caught).
  static void set_backward_fault(OpKind kind, double scale);
  static void clear_backward_fault();

 private:
  void sever_links();

  std::vector<std::shared_ptr<TensorNode>> tape_;
  bool backward_done_ = false;
  Graph* prev_ = nullptr;  // enclosing graph, restored on destruction
};

}  // namespace clickseg

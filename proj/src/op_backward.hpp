#pragma once

#include "clickseg/tensor.hpp"

namespace clickseg::detail {

// Accumulates the node's grad into its inputs' grads. `fault_scale` scales the
// contributions (1.0 normally); the tape applies it only to the faulted kind.
void backprop_node(TensorNode& node, double fault_scale);

}  // namespace clickseg::detail

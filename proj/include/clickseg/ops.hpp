#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clickseg/graph.hpp"
#include "clickseg/tensor.hpp"

namespace clickseg {

/// Applies one primitive. Validates input shapes (ShapeError names the kind
/// and the offending shapes), computes the forward value, checks it is finite
/// (NumericError otherwise) and, when a Graph is active, appends the node to
/// the tape. Forward values are bit-reproducible for identical inputs.
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// Expression-style wrappers over apply_primitive.
Tensor add(const Tensor& a, const Tensor& b);   // trailing-dim broadcasting
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: (H, W, Cin), w: (kh, kw, Cin, Cout), zero padding, stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);                // last axis
Tensor layer_norm(const Tensor& x);             // last axis, eps 1e-5, no affine
Tensor mean(const Tensor& x, int axis = OpAttrs::kAllAxes);
Tensor sum(const Tensor& x, int axis = OpAttrs::kAllAxes);
Tensor max_reduce(const Tensor& x, int axis = OpAttrs::kAllAxes);
Tensor concat(std::span<const Tensor> xs, int axis);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x);              // rank-2
Tensor upsample2x(const Tensor& x);             // (H, W, C) -> (2H, 2W, C)
Tensor gather_rows(const Tensor& x, std::vector<Index> indices);
Tensor log(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

constexpr double kLayerNormEps = 1e-5;

/// Projection weights of one multi-head attention. C must be divisible by
/// n_heads; d_k = C / n_heads is the per-head key width and the square root
/// argument of the logit scaling.
struct AttentionParams {
  int channels = 0;
  int n_heads = 1;
  Tensor w_q, w_k, w_v, w_o;  // each (C, C)

  int head_dim() const { return channels / n_heads; }
  static AttentionParams identity(int channels, int n_heads);
};

/// softmax(Q K^T / sqrt(d_k)) V per head with all four projections applied.
/// q_src: (n_q, C), k_src/v_src: (n_kv, C) with equal row counts.
Tensor multi_head_attention(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                            const AttentionParams& params);

/// Gradient check: backward gradients against central finite differences.
struct GradCheckOptions {
  double h = 1e-6;
  double tol = 1e-3;
  // Differences below this count as matching regardless of relative size:
  // central differences at step h on an O(1) objective carry ~|f|*eps/h of
  // cancellation noise, which swamps the relative test on near-zero
  // gradient coordinates.
  double atol = 1e-7;
  Index max_coords_per_tensor = 0;  // 0 = check every coordinate
  std::uint64_t seed = 1;           // coordinate subsampling
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index coords_checked = 0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = false;
  double max_rel_error = 0.0;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Runs scalar_fn under a fresh graph, backpropagates, then estimates each
/// checked coordinate by central differences with two extra forward passes.
/// Non-finite estimates are flagged and count as failure.
GradCheckReport grad_check(const ScalarFn& scalar_fn, std::vector<Tensor> inputs,
                           const GradCheckOptions& opts = {},
                           std::span<const std::string> names = {});

}  // namespace clickseg

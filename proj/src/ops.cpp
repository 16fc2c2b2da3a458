#include "clickseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "clickseg/rng.hpp"
#include "op_backward.hpp"

namespace clickseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat as_matrix(const ArrayXd& a, Index rows, Index cols) {
  return CMapMat(a.data(), rows, cols);
}
MapMat as_matrix(ArrayXd& a, Index rows, Index cols) { return MapMat(a.data(), rows, cols); }

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void require(bool ok, OpKind kind, const std::string& detail) {
  if (!ok) shape_fail(kind, detail);
}

// ---------------------------------------------------------------------------
// Broadcasting (trailing-dimension alignment, numpy rules).

Shape broadcast_shape(OpKind kind, const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Index da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const Index db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_fail(kind, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast axes, padded to `out` rank.
std::vector<Index> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - shape.size());
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

template <class F>
void broadcast_binary(OpKind, const ArrayXd& a, const Shape& as, const ArrayXd& b,
                      const Shape& bs, const Shape& os, ArrayXd& out, F f) {
  const Index n = numel(os);
  out.resize(n);
  if (as == bs) {
    for (Index i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
    return;
  }
  if (b.size() == 1) {
    const double bv = b[0];
    for (Index i = 0; i < n; ++i) out[i] = f(a[i], bv);
    return;
  }
  if (a.size() == 1) {
    const double av = a[0];
    for (Index i = 0; i < n; ++i) out[i] = f(av, b[i]);
    return;
  }
  if (is_suffix(bs, as) && as == os) {
    const Index len = b.size();
    for (Index base = 0; base < n; base += len)
      for (Index j = 0; j < len; ++j) out[base + j] = f(a[base + j], b[j]);
    return;
  }
  if (is_suffix(as, bs) && bs == os) {
    const Index len = a.size();
    for (Index base = 0; base < n; base += len)
      for (Index j = 0; j < len; ++j) out[base + j] = f(a[j], b[base + j]);
    return;
  }
  // General strided walk.
  const auto sa = broadcast_strides(as, os);
  const auto sb = broadcast_strides(bs, os);
  std::vector<Index> idx(os.size(), 0);
  for (Index i = 0; i < n; ++i) {
    Index ia = 0, ib = 0;
    for (std::size_t d = 0; d < os.size(); ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    out[i] = f(a[ia], b[ib]);
    for (std::size_t d = os.size(); d-- > 0;) {
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
    }
  }
}

// Sum `grad` (shaped like `from`) down to `to` for broadcast backward.
ArrayXd reduce_grad_to(const ArrayXd& grad, const Shape& from, const Shape& to) {
  if (from == to) return grad;
  ArrayXd out = ArrayXd::Zero(numel(to));
  if (numel(to) == 1) {
    out[0] = grad.sum();
    return out;
  }
  if (is_suffix(to, from)) {
    const Index len = numel(to);
    for (Index base = 0; base < grad.size(); base += len)
      out += Eigen::Map<const ArrayXd>(grad.data() + base, len);
    return out;
  }
  const auto st = broadcast_strides(to, from);
  std::vector<Index> idx(from.size(), 0);
  for (Index i = 0; i < grad.size(); ++i) {
    Index it = 0;
    for (std::size_t d = 0; d < from.size(); ++d) it += idx[d] * st[d];
    out[it] += grad[i];
    for (std::size_t d = from.size(); d-- > 0;) {
      if (++idx[d] < from[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reduction geometry: outer x len x inner around `axis`.

struct ReduceDims {
  Index outer = 1, len = 1, inner = 1;
  bool all = false;
};

ReduceDims reduce_dims(OpKind kind, const Shape& shape, int axis) {
  ReduceDims d;
  if (axis == OpAttrs::kAllAxes) {
    d.all = true;
    d.len = numel(shape);
    return d;
  }
  require(axis >= 0 && axis < static_cast<int>(shape.size()), kind,
          "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  for (int i = 0; i < axis; ++i) d.outer *= shape[i];
  d.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) d.inner *= shape[i];
  return d;
}

Shape reduced_shape(const Shape& shape, int axis) {
  if (axis == OpAttrs::kAllAxes) return {};
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (static_cast<int>(i) != axis) out.push_back(shape[i]);
  return out;
}

// ---------------------------------------------------------------------------
// conv2d helpers (channels-last).

struct ConvGeom {
  Index h, w, cin, kh, kw, cout, ho, wo, patch;
};

ConvGeom conv_geom(const Shape& xs, const Shape& ws, int stride, int pad) {
  ConvGeom g;
  g.h = xs[0];
  g.w = xs[1];
  g.cin = xs[2];
  g.kh = ws[0];
  g.kw = ws[1];
  g.cout = ws[3];
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  g.patch = g.kh * g.kw * g.cin;
  return g;
}

void im2col(const ArrayXd& x, const ConvGeom& g, int stride, int pad, ArrayXd& cols) {
  cols.resize(g.ho * g.wo * g.patch);
  double* dst = cols.data();
  const double* src = x.data();
  for (Index oy = 0; oy < g.ho; ++oy) {
    for (Index ox = 0; ox < g.wo; ++ox) {
      for (Index ky = 0; ky < g.kh; ++ky) {
        const Index iy = oy * stride - pad + ky;
        for (Index kx = 0; kx < g.kw; ++kx) {
          const Index ix = ox * stride - pad + kx;
          if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) {
            std::memcpy(dst, src + (iy * g.w + ix) * g.cin, sizeof(double) * g.cin);
          } else {
            std::memset(dst, 0, sizeof(double) * g.cin);
          }
          dst += g.cin;
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  for (const auto& t : inputs)
    require(t.defined() && t.size() > 0, kind, "inputs must be non-empty tensors");
  if (kind == OpKind::kGatherRows)
    require(!attrs.indices.empty(), kind, "at least one row index required");

  auto node = std::make_shared<TensorNode>();
  node->op = kind;
  node->attrs = attrs;

  switch (kind) {
    case OpKind::kLeaf:
      throw std::invalid_argument("apply_primitive: leaf is not an applicable primitive");

    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv: {
      require(inputs.size() == 2, kind, "expects 2 inputs");
      const auto& a = inputs[0];
      const auto& b = inputs[1];
      node->shape = broadcast_shape(kind, a.shape(), b.shape());
      if (kind == OpKind::kAdd)
        broadcast_binary(kind, a.array(), a.shape(), b.array(), b.shape(), node->shape,
                         node->value, [](double x, double y) { return x + y; });
      else if (kind == OpKind::kSub)
        broadcast_binary(kind, a.array(), a.shape(), b.array(), b.shape(), node->shape,
                         node->value, [](double x, double y) { return x - y; });
      else if (kind == OpKind::kMul)
        broadcast_binary(kind, a.array(), a.shape(), b.array(), b.shape(), node->shape,
                         node->value, [](double x, double y) { return x * y; });
      else
        broadcast_binary(kind, a.array(), a.shape(), b.array(), b.shape(), node->shape,
                         node->value, [](double x, double y) { return x / y; });
      break;
    }

    case OpKind::kScalarMul: {
      require(inputs.size() == 1, kind, "expects 1 input");
      node->shape = inputs[0].shape();
      node->value = inputs[0].array() * attrs.scalar;
      break;
    }

    case OpKind::kMatMul: {
      require(inputs.size() == 2, kind, "expects 2 inputs");
      const auto& a = inputs[0];
      const auto& b = inputs[1];
      require(a.rank() == 2 && b.rank() == 2, kind,
              "rank-2 operands required, got " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
      require(a.shape()[1] == b.shape()[0], kind,
              "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
      const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
      node->shape = {m, n};
      node->value.resize(m * n);
      as_matrix(node->value, m, n).noalias() =
          as_matrix(a.array(), m, k) * as_matrix(b.array(), k, n);
      break;
    }

    case OpKind::kConv2d: {
      require(inputs.size() == 2, kind, "expects input and weight");
      const auto& x = inputs[0];
      const auto& w = inputs[1];
      require(x.rank() == 3, kind, "input must be (H, W, Cin), got " + shape_str(x.shape()));
      require(w.rank() == 4, kind,
              "weight must be (kh, kw, Cin, Cout), got " + shape_str(w.shape()));
      require(x.shape()[2] == w.shape()[2], kind,
              "channel mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
      require(attrs.stride == 1 || attrs.stride == 2, kind, "stride must be 1 or 2");
      require(attrs.pad >= 0, kind, "negative padding");
      const ConvGeom g = conv_geom(x.shape(), w.shape(), attrs.stride, attrs.pad);
      require(g.ho > 0 && g.wo > 0, kind,
              "kernel " + shape_str(w.shape()) + " larger than padded input " +
                  shape_str(x.shape()));
      ArrayXd cols;
      im2col(x.array(), g, attrs.stride, attrs.pad, cols);
      node->shape = {g.ho, g.wo, g.cout};
      node->value.resize(g.ho * g.wo * g.cout);
      as_matrix(node->value, g.ho * g.wo, g.cout).noalias() =
          as_matrix(cols, g.ho * g.wo, g.patch) * as_matrix(w.array(), g.patch, g.cout);
      break;
    }

    case OpKind::kRelu: {
      require(inputs.size() == 1, kind, "expects 1 input");
      node->shape = inputs[0].shape();
      node->value = inputs[0].array().max(0.0);
      break;
    }

    case OpKind::kSigmoid: {
      require(inputs.size() == 1, kind, "expects 1 input");
      node->shape = inputs[0].shape();
      node->value = ((-inputs[0].array()).exp() + 1.0).inverse();
      break;
    }

    case OpKind::kSoftmax: {
      require(inputs.size() == 1 && inputs[0].rank() >= 1, kind, "expects 1 non-scalar input");
      const auto& x = inputs[0];
      node->shape = x.shape();
      node->value.resize(x.size());
      const Index last = x.shape().back();
      node->value = x.array();
      for (Index base = 0; base < x.size(); base += last) {
        auto seg = node->value.segment(base, last);
        const double m = seg.maxCoeff();
        seg = (seg - m).exp();  // elementwise, aliasing-safe: no temporary
        seg /= seg.sum();
      }
      break;
    }

    case OpKind::kLayerNorm: {
      require(inputs.size() == 1 && inputs[0].rank() >= 1, kind, "expects 1 non-scalar input");
      const auto& x = inputs[0];
      node->shape = x.shape();
      node->value.resize(x.size());
      const Index last = x.shape().back();
      for (Index base = 0; base < x.size(); base += last) {
        auto seg = x.array().segment(base, last);
        const double mu = seg.mean();
        const double var = (seg - mu).square().mean();
        node->value.segment(base, last) = (seg - mu) / std::sqrt(var + kLayerNormEps);
      }
      break;
    }

    case OpKind::kMean:
    case OpKind::kSum:
    case OpKind::kMax: {
      require(inputs.size() == 1, kind, "expects 1 input");
      const auto& x = inputs[0];
      const ReduceDims d = reduce_dims(kind, x.shape(), attrs.axis);
      node->shape = reduced_shape(x.shape(), attrs.axis);
      node->value.resize(std::max<Index>(numel(node->shape), 1));
      const double* src = x.array().data();
      for (Index o = 0; o < d.outer; ++o) {
        for (Index i = 0; i < d.inner; ++i) {
          const double* p = src + o * d.len * d.inner + i;
          double acc = (kind == OpKind::kMax) ? p[0] : 0.0;
          for (Index j = 0; j < d.len; ++j) {
            const double v = p[j * d.inner];
            if (kind == OpKind::kMax)
              acc = std::max(acc, v);
            else
              acc += v;
          }
          if (kind == OpKind::kMean) acc /= static_cast<double>(d.len);
          node->value[o * d.inner + i] = acc;
        }
      }
      break;
    }

    case OpKind::kConcat: {
      require(!inputs.empty(), kind, "expects at least 1 input");
      const int axis = attrs.axis;
      const Shape& s0 = inputs[0].shape();
      require(axis >= 0 && axis < static_cast<int>(s0.size()), kind,
              "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
      Index axis_total = 0;
      for (const auto& t : inputs) {
        require(t.rank() == inputs[0].rank(), kind, "rank mismatch between inputs");
        for (std::size_t d = 0; d < s0.size(); ++d)
          require(static_cast<int>(d) == axis || t.shape()[d] == s0[d], kind,
                  "shapes differ off the concat axis: " + shape_str(s0) + " vs " +
                      shape_str(t.shape()));
        axis_total += t.shape()[axis];
      }
      node->shape = s0;
      node->shape[axis] = axis_total;
      node->value.resize(numel(node->shape));
      Index outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= s0[d];
      for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
      Index offset = 0;
      for (const auto& t : inputs) {
        const Index seg = t.shape()[axis] * inner;
        for (Index o = 0; o < outer; ++o)
          std::memcpy(node->value.data() + o * axis_total * inner + offset,
                      t.array().data() + o * seg, sizeof(double) * seg);
        offset += seg;
      }
      break;
    }

    case OpKind::kReshape: {
      require(inputs.size() == 1, kind, "expects 1 input");
      require(numel(attrs.target_shape) == inputs[0].size(), kind,
              "cannot reshape " + shape_str(inputs[0].shape()) + " to " +
                  shape_str(attrs.target_shape));
      node->shape = attrs.target_shape;
      node->value = inputs[0].array();
      break;
    }

    case OpKind::kTranspose: {
      require(inputs.size() == 1 && inputs[0].rank() == 2, kind,
              "rank-2 input required, got " +
                  (inputs.empty() ? std::string("none") : shape_str(inputs[0].shape())));
      const Index r = inputs[0].shape()[0], c = inputs[0].shape()[1];
      node->shape = {c, r};
      node->value.resize(r * c);
      as_matrix(node->value, c, r) = as_matrix(inputs[0].array(), r, c).transpose();
      break;
    }

    case OpKind::kUpsample2x: {
      require(inputs.size() == 1 && inputs[0].rank() == 3, kind,
              "(H, W, C) input required");
      const Index h = inputs[0].shape()[0], w = inputs[0].shape()[1], c = inputs[0].shape()[2];
      node->shape = {2 * h, 2 * w, c};
      node->value.resize(4 * h * w * c);
      const double* src = inputs[0].array().data();
      double* dst = node->value.data();
      for (Index y = 0; y < 2 * h; ++y) {
        const double* row = src + (y / 2) * w * c;
        for (Index x = 0; x < 2 * w; ++x) {
          std::memcpy(dst, row + (x / 2) * c, sizeof(double) * c);
          dst += c;
        }
      }
      break;
    }

    case OpKind::kGatherRows: {
      require(inputs.size() == 1 && inputs[0].rank() >= 1, kind, "expects 1 non-scalar input");
      const Index rows = inputs[0].shape()[0];
      const Index inner = inputs[0].size() / std::max<Index>(rows, 1);
      for (Index idx : attrs.indices)
        require(idx >= 0 && idx < rows, kind,
                "row index " + std::to_string(idx) + " out of range [0, " +
                    std::to_string(rows) + ")");
      node->shape = inputs[0].shape();
      node->shape[0] = static_cast<Index>(attrs.indices.size());
      node->value.resize(node->shape[0] * inner);
      for (std::size_t i = 0; i < attrs.indices.size(); ++i)
        std::memcpy(node->value.data() + i * inner,
                    inputs[0].array().data() + attrs.indices[i] * inner,
                    sizeof(double) * inner);
      break;
    }

    case OpKind::kLog: {
      require(inputs.size() == 1, kind, "expects 1 input");
      node->shape = inputs[0].shape();
      node->value = inputs[0].array().log();
      break;
    }
  }

  if (!node->value.allFinite())
    throw NumericError(std::string("non-finite output of ") + op_name(kind));

  Graph* g = Graph::current();
  if (g) {
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) {
      node->inputs.push_back(t.node());
      node->needs_grad = node->needs_grad || t.node()->needs_grad;
    }
    g->record(node);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

void backprop_node(TensorNode& node, double fault_scale) {
  const ArrayXd& g = node.grad;
  auto& in = node.inputs;
  auto add_grad = [&](const std::shared_ptr<TensorNode>& t, ArrayXd contribution) {
    if (!t->needs_grad) return;
    t->ensure_grad();
    t->grad += contribution * fault_scale;
  };

  switch (node.op) {
    case OpKind::kLeaf:
      return;

    case OpKind::kAdd: {
      add_grad(in[0], reduce_grad_to(g, node.shape, in[0]->shape));
      add_grad(in[1], reduce_grad_to(g, node.shape, in[1]->shape));
      return;
    }
    case OpKind::kSub: {
      add_grad(in[0], reduce_grad_to(g, node.shape, in[0]->shape));
      add_grad(in[1], reduce_grad_to(-g, node.shape, in[1]->shape));
      return;
    }
    case OpKind::kMul: {
      if (in[0]->needs_grad) {
        ArrayXd ga;
        broadcast_binary(OpKind::kMul, g, node.shape, in[1]->value, in[1]->shape, node.shape,
                         ga, [](double x, double y) { return x * y; });
        add_grad(in[0], reduce_grad_to(ga, node.shape, in[0]->shape));
      }
      if (in[1]->needs_grad) {
        ArrayXd gb;
        broadcast_binary(OpKind::kMul, g, node.shape, in[0]->value, in[0]->shape, node.shape,
                         gb, [](double x, double y) { return x * y; });
        add_grad(in[1], reduce_grad_to(gb, node.shape, in[1]->shape));
      }
      return;
    }
    case OpKind::kDiv: {
      if (in[0]->needs_grad) {
        ArrayXd ga;
        broadcast_binary(OpKind::kDiv, g, node.shape, in[1]->value, in[1]->shape, node.shape,
                         ga, [](double x, double y) { return x / y; });
        add_grad(in[0], reduce_grad_to(ga, node.shape, in[0]->shape));
      }
      if (in[1]->needs_grad) {
        // d/db (a/b) = -a / b^2 = -value / b
        ArrayXd q;
        broadcast_binary(OpKind::kDiv, node.value, node.shape, in[1]->value, in[1]->shape,
                         node.shape, q, [](double v, double b) { return v / b; });
        add_grad(in[1], reduce_grad_to(ArrayXd(-g * q), node.shape, in[1]->shape));
      }
      return;
    }
    case OpKind::kScalarMul: {
      add_grad(in[0], g * node.attrs.scalar);
      return;
    }
    case OpKind::kMatMul: {
      const Index m = in[0]->shape[0], k = in[0]->shape[1], n = in[1]->shape[1];
      if (in[0]->needs_grad) {
        ArrayXd da(m * k);
        as_matrix(da, m, k).noalias() =
            as_matrix(g, m, n) * as_matrix(in[1]->value, k, n).transpose();
        add_grad(in[0], std::move(da));
      }
      if (in[1]->needs_grad) {
        ArrayXd db(k * n);
        as_matrix(db, k, n).noalias() =
            as_matrix(in[0]->value, m, k).transpose() * as_matrix(g, m, n);
        add_grad(in[1], std::move(db));
      }
      return;
    }
    case OpKind::kConv2d: {
      const ConvGeom geo =
          conv_geom(in[0]->shape, in[1]->shape, node.attrs.stride, node.attrs.pad);
      const Index rows = geo.ho * geo.wo;
      if (in[1]->needs_grad) {
        ArrayXd cols;
        im2col(in[0]->value, geo, node.attrs.stride, node.attrs.pad, cols);
        ArrayXd dw(geo.patch * geo.cout);
        as_matrix(dw, geo.patch, geo.cout).noalias() =
            as_matrix(cols, rows, geo.patch).transpose() * as_matrix(g, rows, geo.cout);
        add_grad(in[1], std::move(dw));
      }
      if (in[0]->needs_grad) {
        ArrayXd dcols(rows * geo.patch);
        as_matrix(dcols, rows, geo.patch).noalias() =
            as_matrix(g, rows, geo.cout) *
            as_matrix(in[1]->value, geo.patch, geo.cout).transpose();
        ArrayXd dx = ArrayXd::Zero(in[0]->value.size());
        const double* src = dcols.data();
        for (Index oy = 0; oy < geo.ho; ++oy) {
          for (Index ox = 0; ox < geo.wo; ++ox) {
            for (Index ky = 0; ky < geo.kh; ++ky) {
              const Index iy = oy * node.attrs.stride - node.attrs.pad + ky;
              for (Index kx = 0; kx < geo.kw; ++kx) {
                const Index ix = ox * node.attrs.stride - node.attrs.pad + kx;
                if (iy >= 0 && iy < geo.h && ix >= 0 && ix < geo.w) {
                  double* dst = dx.data() + (iy * geo.w + ix) * geo.cin;
                  for (Index c = 0; c < geo.cin; ++c) dst[c] += src[c];
                }
                src += geo.cin;
              }
            }
          }
        }
        add_grad(in[0], std::move(dx));
      }
      return;
    }
    case OpKind::kRelu: {
      add_grad(in[0], ArrayXd(g * (in[0]->value > 0.0).cast<double>()));
      return;
    }
    case OpKind::kSigmoid: {
      add_grad(in[0], ArrayXd(g * node.value * (1.0 - node.value)));
      return;
    }
    case OpKind::kSoftmax: {
      if (!in[0]->needs_grad) return;
      const Index last = node.shape.back();
      ArrayXd dx(node.value.size());
      for (Index base = 0; base < node.value.size(); base += last) {
        auto y = node.value.segment(base, last);
        auto gy = g.segment(base, last);
        const double dot = (y * gy).sum();
        dx.segment(base, last) = y * (gy - dot);
      }
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kLayerNorm: {
      if (!in[0]->needs_grad) return;
      const Index last = node.shape.back();
      ArrayXd dx(node.value.size());
      for (Index base = 0; base < node.value.size(); base += last) {
        auto x = in[0]->value.segment(base, last);
        auto y = node.value.segment(base, last);
        auto gy = g.segment(base, last);
        const double mu = x.mean();
        const double var = (x - mu).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        const double gmean = gy.mean();
        const double gymean = (gy * y).mean();
        dx.segment(base, last) = inv * (gy - gmean - y * gymean);
      }
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kMean:
    case OpKind::kSum:
    case OpKind::kMax: {
      if (!in[0]->needs_grad) return;
      const ReduceDims d = reduce_dims(node.op, in[0]->shape, node.attrs.axis);
      ArrayXd dx = ArrayXd::Zero(in[0]->value.size());
      const double* src = in[0]->value.data();
      for (Index o = 0; o < d.outer; ++o) {
        for (Index i = 0; i < d.inner; ++i) {
          const double gv = g[o * d.inner + i];
          double* p = dx.data() + o * d.len * d.inner + i;
          if (node.op == OpKind::kMax) {
            // first maximum wins
            const double* xp = src + o * d.len * d.inner + i;
            Index best = 0;
            for (Index j = 1; j < d.len; ++j)
              if (xp[j * d.inner] > xp[best * d.inner]) best = j;
            p[best * d.inner] += gv;
          } else {
            const double v = node.op == OpKind::kMean ? gv / static_cast<double>(d.len) : gv;
            for (Index j = 0; j < d.len; ++j) p[j * d.inner] += v;
          }
        }
      }
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kConcat: {
      const int axis = node.attrs.axis;
      Index outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= node.shape[d];
      for (std::size_t d = axis + 1; d < node.shape.size(); ++d) inner *= node.shape[d];
      const Index total = node.shape[axis] * inner;
      Index offset = 0;
      for (auto& t : in) {
        const Index seg = t->shape[axis] * inner;
        if (t->needs_grad) {
          ArrayXd dt(t->value.size());
          for (Index o = 0; o < outer; ++o)
            std::memcpy(dt.data() + o * seg, g.data() + o * total + offset,
                        sizeof(double) * seg);
          add_grad(t, std::move(dt));
        }
        offset += seg;
      }
      return;
    }
    case OpKind::kReshape: {
      add_grad(in[0], g);
      return;
    }
    case OpKind::kTranspose: {
      const Index r = node.shape[0], c = node.shape[1];
      ArrayXd dx(r * c);
      as_matrix(dx, c, r) = as_matrix(g, r, c).transpose();
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kUpsample2x: {
      if (!in[0]->needs_grad) return;
      const Index h = in[0]->shape[0], w = in[0]->shape[1], c = in[0]->shape[2];
      ArrayXd dx = ArrayXd::Zero(h * w * c);
      const double* src = g.data();
      for (Index y = 0; y < 2 * h; ++y) {
        for (Index x = 0; x < 2 * w; ++x) {
          double* dst = dx.data() + ((y / 2) * w + x / 2) * c;
          for (Index ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          src += c;
        }
      }
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kGatherRows: {
      if (!in[0]->needs_grad) return;
      const Index inner = in[0]->value.size() / std::max<Index>(in[0]->shape[0], 1);
      ArrayXd dx = ArrayXd::Zero(in[0]->value.size());
      for (std::size_t i = 0; i < node.attrs.indices.size(); ++i)
        dx.segment(node.attrs.indices[i] * inner, inner) +=
            g.segment(static_cast<Index>(i) * inner, inner);
      add_grad(in[0], std::move(dx));
      return;
    }
    case OpKind::kLog: {
      add_grad(in[0], ArrayXd(g / in[0]->value));
      return;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Wrappers

Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(OpKind::kAdd, in);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(OpKind::kSub, in);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(OpKind::kMul, in);
}
Tensor div(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(OpKind::kDiv, in);
}
Tensor scalar_mul(const Tensor& a, double c) {
  OpAttrs attrs;
  attrs.scalar = c;
  const Tensor in[] = {a};
  return apply_primitive(OpKind::kScalarMul, in, attrs);
}
Tensor matmul(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(OpKind::kMatMul, in);
}
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  const Tensor in[] = {x, w};
  return apply_primitive(OpKind::kConv2d, in, attrs);
}
Tensor relu(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kRelu, in);
}
Tensor sigmoid(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kSigmoid, in);
}
Tensor softmax(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kSoftmax, in);
}
Tensor layer_norm(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kLayerNorm, in);
}
Tensor mean(const Tensor& x, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kMean, in, attrs);
}
Tensor sum(const Tensor& x, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kSum, in, attrs);
}
Tensor max_reduce(const Tensor& x, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kMax, in, attrs);
}
Tensor concat(std::span<const Tensor> xs, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return apply_primitive(OpKind::kConcat, xs, attrs);
}
Tensor reshape(const Tensor& x, const Shape& shape) {
  OpAttrs attrs;
  attrs.target_shape = shape;
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kReshape, in, attrs);
}
Tensor transpose(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kTranspose, in);
}
Tensor upsample2x(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kUpsample2x, in);
}
Tensor gather_rows(const Tensor& x, std::vector<Index> indices) {
  OpAttrs attrs;
  attrs.indices = std::move(indices);
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kGatherRows, in, attrs);
}
Tensor log(const Tensor& x) {
  const Tensor in[] = {x};
  return apply_primitive(OpKind::kLog, in);
}

// ---------------------------------------------------------------------------
// Multi-head attention

AttentionParams AttentionParams::identity(int channels, int n_heads) {
  AttentionParams p;
  p.channels = channels;
  p.n_heads = n_heads;
  ArrayXd eye(static_cast<Index>(channels) * channels);
  as_matrix(eye, channels, channels) = RowMat::Identity(channels, channels);
  p.w_q = Tensor::from_array({channels, channels}, eye);
  p.w_k = Tensor::from_array({channels, channels}, eye);
  p.w_v = Tensor::from_array({channels, channels}, eye);
  p.w_o = Tensor::from_array({channels, channels}, eye);
  return p;
}

namespace {

// Column slice [c0, c0+len) of a (rows, C) tensor via transpose + gather-rows.
Tensor slice_cols(const Tensor& x, Index c0, Index len) {
  std::vector<Index> idx(len);
  for (Index i = 0; i < len; ++i) idx[i] = c0 + i;
  return transpose(gather_rows(transpose(x), std::move(idx)));
}

}  // namespace

Tensor multi_head_attention(const Tensor& q_src, const Tensor& k_src, const Tensor& v_src,
                            const AttentionParams& params) {
  const OpKind kind = OpKind::kMatMul;
  require(params.channels > 0 && params.n_heads > 0 &&
              params.channels % params.n_heads == 0,
          kind, "attention channels must be divisible by head count");
  require(q_src.rank() == 2 && k_src.rank() == 2 && v_src.rank() == 2, kind,
          "attention operands must be rank 2");
  require(q_src.shape()[1] == params.channels && k_src.shape()[1] == params.channels &&
              v_src.shape()[1] == params.channels,
          kind, "attention operands must have width C");
  if (k_src.shape()[0] != v_src.shape()[0])
    throw ShapeError("attention key/value row counts differ: " + shape_str(k_src.shape()) +
                     " vs " + shape_str(v_src.shape()));
  if (k_src.shape()[0] == 0) throw ShapeError("attention requires at least one key row");

  const Index dk = params.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  const Tensor q = matmul(q_src, params.w_q);
  const Tensor k = matmul(k_src, params.w_k);
  const Tensor v = matmul(v_src, params.w_v);

  std::vector<Tensor> heads;
  heads.reserve(params.n_heads);
  for (int h = 0; h < params.n_heads; ++h) {
    // The logit scaling is folded into the (small) query block before the
    // row-count-squared matmul.
    const Tensor qh = scalar_mul(slice_cols(q, h * dk, dk), scale);
    const Tensor kh = slice_cols(k, h * dk, dk);
    const Tensor vh = slice_cols(v, h * dk, dk);
    const Tensor weights = softmax(matmul(qh, transpose(kh)));
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat(heads, 1), params.w_o);
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const ScalarFn& scalar_fn, std::vector<Tensor> inputs,
                           const GradCheckOptions& opts, std::span<const std::string> names) {
  for (auto& t : inputs) t.set_requires_grad(true);

  // Analytic gradients.
  {
    Graph graph;
    Tensor out = scalar_fn(inputs);
    for (auto& t : inputs) t.zero_grad();
    graph.backward(out);
  }
  std::vector<ArrayXd> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : ArrayXd::Zero(t.size()));

  auto eval = [&]() {
    try {
      Tensor out = scalar_fn(inputs);  // no graph active: eager forward only
      return out.item();
    } catch (const NumericError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  Rng rng(opts.seed);
  GradCheckReport report;
  report.pass = true;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    GradCheckEntry entry;
    entry.name = i < names.size() ? names[i] : "input" + std::to_string(i);
    Tensor& t = inputs[i];

    std::vector<Index> coords(t.size());
    for (Index c = 0; c < t.size(); ++c) coords[c] = c;
    if (opts.max_coords_per_tensor > 0 && t.size() > opts.max_coords_per_tensor) {
      // deterministic subsample without replacement
      for (Index c = 0; c < opts.max_coords_per_tensor; ++c) {
        const Index j =
            c + static_cast<Index>(rng.below(static_cast<std::uint64_t>(t.size() - c)));
        std::swap(coords[c], coords[j]);
      }
      coords.resize(opts.max_coords_per_tensor);
    }

    for (Index c : coords) {
      const double saved = t.mutable_array()[c];
      t.mutable_array()[c] = saved + opts.h;
      const double fp = eval();
      t.mutable_array()[c] = saved - opts.h;
      const double fm = eval();
      t.mutable_array()[c] = saved;
      const double fd = (fp - fm) / (2.0 * opts.h);
      if (!std::isfinite(fd)) {
        entry.finite = false;
        report.pass = false;
        continue;
      }
      // Combined tolerance: disagreements below atol are finite-difference
      // cancellation noise and count as matching; larger ones are judged
      // relatively against the bigger of the two estimates.
      const double a = analytic[i][c];
      const double err = std::abs(a - fd);
      const double denom = std::max(std::abs(a), std::abs(fd));
      const double rel = err <= opts.atol ? 0.0 : err / denom;
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    if (entry.max_rel_error > opts.tol || !entry.finite) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace clickseg

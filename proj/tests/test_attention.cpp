#include <doctest.h>

#include <cmath>
#include <vector>

#include "clickseg/graph.hpp"
#include "clickseg/ops.hpp"
#include "clickseg/rng.hpp"

using namespace clickseg;

namespace {

Tensor rand_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(data));
}

AttentionParams rand_params(Rng& rng, int channels, int n_heads, bool requires_grad = false) {
  AttentionParams p;
  p.channels = channels;
  p.n_heads = n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  p.w_q = rand_tensor(rng, {channels, channels}, -s, s);
  p.w_k = rand_tensor(rng, {channels, channels}, -s, s);
  p.w_v = rand_tensor(rng, {channels, channels}, -s, s);
  p.w_o = rand_tensor(rng, {channels, channels}, -s, s);
  if (requires_grad)
    for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) t->set_requires_grad(true);
  return p;
}

// Dense single-pass oracle: full-width softmax(Q K^T / sqrt(d_k)) V computed
// with plain loops, identity projections, one head.
std::vector<double> dense_attention(const std::vector<double>& q, Index nq,
                                    const std::vector<double>& k,
                                    const std::vector<double>& v, Index nk, Index c) {
  std::vector<double> out(nq * c, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  for (Index i = 0; i < nq; ++i) {
    std::vector<double> logits(nk, 0.0);
    for (Index j = 0; j < nk; ++j)
      for (Index d = 0; d < c; ++d) logits[j] += q[i * c + d] * k[j * c + d] * scale;
    double m = logits[0];
    for (double l : logits) m = std::max(m, l);
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - m);
      z += l;
    }
    for (Index j = 0; j < nk; ++j)
      for (Index d = 0; d < c; ++d) out[i * c + d] += (logits[j] / z) * v[j * c + d];
  }
  return out;
}

}  // namespace

TEST_CASE("a single key/value row dominates regardless of the query") {
  Rng rng(41);
  const int c = 4;
  AttentionParams p = rand_params(rng, c, 2);
  Tensor kv = rand_tensor(rng, {1, c});
  Tensor v_proj = matmul(kv, p.w_v);
  Tensor expected = matmul(v_proj, p.w_o);

  for (int trial = 0; trial < 3; ++trial) {
    Tensor q = rand_tensor(rng, {2, c}, -3.0, 3.0);
    Tensor out = multi_head_attention(q, kv, kv, p);
    REQUIRE(out.shape() == Shape{2, c});
    for (Index r = 0; r < 2; ++r)
      for (Index d = 0; d < c; ++d)
        CHECK(out.at(r * c + d) == doctest::Approx(expected.at(d)).epsilon(1e-12));
  }
}

TEST_CASE("constant logit shifts leave attention output unchanged") {
  // With identity projections and keys whose last coordinate is equal, adding
  // a constant to the query's last coordinate shifts every pre-softmax logit
  // by the same amount.
  const int c = 2;
  AttentionParams p = AttentionParams::identity(c, 1);
  Tensor keys = Tensor::from_data({3, c}, {0.3, 1.0, -0.8, 1.0, 1.7, 1.0});
  Tensor vals = Tensor::from_data({3, c}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  Tensor q1 = Tensor::from_data({1, c}, {0.6, 0.0});
  Tensor q2 = Tensor::from_data({1, c}, {0.6, 5.0});

  Tensor o1 = multi_head_attention(q1, keys, vals, p);
  Tensor o2 = multi_head_attention(q2, keys, vals, p);
  for (Index i = 0; i < o1.size(); ++i)
    CHECK(o1.at(i) == doctest::Approx(o2.at(i)).epsilon(1e-12));
}

TEST_CASE("identity-projection attention matches the dense oracle") {
  Rng rng(43);
  const Index nq = 2, nk = 3, c = 4;
  Tensor q = rand_tensor(rng, {nq, c});
  Tensor k = rand_tensor(rng, {nk, c});
  Tensor v = rand_tensor(rng, {nk, c});
  AttentionParams p = AttentionParams::identity(static_cast<int>(c), 1);

  Tensor out = multi_head_attention(q, k, v, p);
  const auto oracle = dense_attention(
      std::vector<double>(q.values().begin(), q.values().end()), nq,
      std::vector<double>(k.values().begin(), k.values().end()),
      std::vector<double>(v.values().begin(), v.values().end()), nk, c);
  REQUIRE(out.size() == static_cast<Index>(oracle.size()));
  for (Index i = 0; i < out.size(); ++i)
    CHECK(out.at(i) == doctest::Approx(oracle[i]).epsilon(1e-12));
}

TEST_CASE("multi-head with identity projections averages per-head slices consistently") {
  // Two heads over c=4: head h attends with d_k = 2 slices. Oracle: run the
  // dense attention per column block.
  Rng rng(47);
  const Index nq = 3, nk = 4, c = 4;
  Tensor q = rand_tensor(rng, {nq, c});
  Tensor k = rand_tensor(rng, {nk, c});
  Tensor v = rand_tensor(rng, {nk, c});
  AttentionParams p = AttentionParams::identity(static_cast<int>(c), 2);
  Tensor out = multi_head_attention(q, k, v, p);

  const Index dk = 2;
  for (int h = 0; h < 2; ++h) {
    std::vector<double> qh(nq * dk), kh(nk * dk), vh(nk * dk);
    for (Index r = 0; r < nq; ++r)
      for (Index d = 0; d < dk; ++d) qh[r * dk + d] = q.at(r * c + h * dk + d);
    for (Index r = 0; r < nk; ++r)
      for (Index d = 0; d < dk; ++d) {
        kh[r * dk + d] = k.at(r * c + h * dk + d);
        vh[r * dk + d] = v.at(r * c + h * dk + d);
      }
    const auto oh = dense_attention(qh, nq, kh, vh, nk, dk);
    for (Index r = 0; r < nq; ++r)
      for (Index d = 0; d < dk; ++d)
        CHECK(out.at(r * c + h * dk + d) == doctest::Approx(oh[r * dk + d]).epsilon(1e-12));
  }
}

TEST_CASE("key/value row-count mismatch is rejected") {
  AttentionParams p = AttentionParams::identity(4, 1);
  Tensor q = Tensor::zeros({2, 4});
  Tensor k = Tensor::zeros({3, 4});
  Tensor v = Tensor::zeros({2, 4});
  CHECK_THROWS_AS((void)multi_head_attention(q, k, v, p), ShapeError);
}

TEST_CASE("full attention block passes the gradient check") {
  Rng rng(53);
  const Index nq = 3, nk = 4;
  const int c = 4;
  AttentionParams p = rand_params(rng, c, 2);
  Tensor q = rand_tensor(rng, {nq, c});
  Tensor k = rand_tensor(rng, {nk, c});
  Tensor v = rand_tensor(rng, {nk, c});
  Tensor w = rand_tensor(rng, {nq, c});  // mixing weights make the scalar non-degenerate

  auto fn = [&](const std::vector<Tensor>& in) {
    AttentionParams pp = p;
    pp.w_q = in[3];
    pp.w_k = in[4];
    pp.w_v = in[5];
    pp.w_o = in[6];
    return sum(mul(multi_head_attention(in[0], in[1], in[2], pp), w));
  };
  const std::string names[] = {"q", "k", "v", "w_q", "w_k", "w_v", "w_o"};
  auto report = grad_check(fn, {q, k, v, p.w_q, p.w_k, p.w_v, p.w_o}, {}, names);
  INFO("max relative error ", report.max_rel_error);
  CHECK(report.pass);
}

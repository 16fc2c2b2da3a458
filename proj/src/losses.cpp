#include "clickseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clickseg {

namespace {

struct FlatLogits {
  Tensor flat;    // (H*W, K)
  Index pixels = 0;
  Index classes = 0;
};

FlatLogits check_inputs(const Tensor& logits, const Mask& gt) {
  if (logits.rank() != 3)
    throw ShapeError("loss expects (H, W, K) logits, got " + shape_str(logits.shape()));
  const Index h = logits.shape()[0], w = logits.shape()[1], k = logits.shape()[2];
  if (gt.h != h || gt.w != w)
    throw ShapeError("label map " + std::to_string(gt.h) + "x" + std::to_string(gt.w) +
                     " does not match logits " + shape_str(logits.shape()));
  for (auto label : gt.data)
    if (label >= k)
      throw ShapeError("label " + std::to_string(label) + " exceeds the " +
                       std::to_string(k) + " logit channels");
  return {reshape(logits, {h * w, k}), h * w, k};
}

Tensor one_hot(const Mask& gt, Index classes) {
  const Index pixels = gt.h * gt.w;
  std::vector<double> data(static_cast<std::size_t>(pixels * classes), 0.0);
  for (Index p = 0; p < pixels; ++p)
    data[static_cast<std::size_t>(p * classes + gt.data[static_cast<std::size_t>(p)])] = 1.0;
  return Tensor::from_data({pixels, classes}, std::move(data));
}

}  // namespace

Tensor loss_bootstrapped_ce(const Tensor& logits, const Mask& gt, double r) {
  if (!(r > 0.0) || r > 1.0)
    throw ConfigError("bootstrap ratio must lie in (0, 1], got " + std::to_string(r));
  const FlatLogits in = check_inputs(logits, gt);

  Tensor probs = softmax(in.flat);
  Tensor picked = sum(probs * one_hot(gt, in.classes), 1);      // (pixels,)
  Tensor ce = scalar_mul(log(picked + Tensor::scalar(kCeEps)), -1.0);

  const Index keep = static_cast<Index>(
      std::ceil(r * static_cast<double>(in.pixels)) + 0.5);
  if (keep >= in.pixels) return mean(ce);

  // rank pixels by loss on the host; ties broken by index so runs are
  // reproducible bit for bit
  std::vector<Index> order(static_cast<std::size_t>(in.pixels));
  std::iota(order.begin(), order.end(), Index{0});
  const auto& values = ce.array();
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(keep));
  return mean(gather_rows(reshape(ce, {in.pixels, 1}), std::move(order)));
}

Tensor loss_dice(const Tensor& logits, const Mask& gt) {
  const FlatLogits in = check_inputs(logits, gt);
  Tensor probs = softmax(in.flat);
  Tensor hot = one_hot(gt, in.classes);

  Tensor intersection = sum(probs * hot, 0);  // (classes,)
  Tensor prob_mass = sum(probs, 0);

  std::vector<Index> counts(static_cast<std::size_t>(in.classes), 0);
  for (auto label : gt.data) ++counts[label];
  std::vector<Index> present;
  std::vector<double> denom_add(static_cast<std::size_t>(in.classes), kDiceEps);
  for (Index c = 0; c < in.classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) continue;
    present.push_back(c);
    denom_add[static_cast<std::size_t>(c)] += static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }

  Tensor dice = div(scalar_mul(intersection, 2.0),
                    prob_mass + Tensor::from_data({in.classes}, std::move(denom_add)));
  Tensor kept = gather_rows(reshape(dice, {in.classes, 1}), std::move(present));
  return Tensor::scalar(1.0) - mean(kept);
}

}  // namespace clickseg

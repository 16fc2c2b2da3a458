#pragma once

#include "clickseg/ops.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

/// Per-pixel cross-entropy of (H, W, K) logits against integer labels,
/// sorted descending; returns the mean of the top ceil(r * H * W) values.
/// r = 1 is the ordinary mean. Differentiable; the kept-pixel selection is
/// data-dependent but constant within a backward pass.
Tensor loss_bootstrapped_ce(const Tensor& logits, const Mask& gt, double r);

/// 1 - mean over classes present in gt (background included) of
/// 2*sum(p_c*g_c) / (sum(p_c) + sum(g_c) + eps), p = softmax(logits).
Tensor loss_dice(const Tensor& logits, const Mask& gt);

constexpr double kDiceEps = 1e-6;
/// Keeps log() off exact zeros when a softmax underflows; shifts CE by less
/// than 1e-14 for any probability above 1e-1.
constexpr double kCeEps = 1e-15;

}  // namespace clickseg

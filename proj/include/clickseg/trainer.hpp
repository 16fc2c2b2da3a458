#pragma once

#include <filesystem>
#include <vector>

#include "clickseg/losses.hpp"
#include "clickseg/metrics.hpp"
#include "clickseg/model.hpp"

namespace clickseg {

struct TrainConfig {
  Index t_train = 4;   // frames per sampled training window, >= 2
  Index batch = 4;     // windows per optimizer step, gradient-accumulated
  Index steps = 100;
  double lr = 3e-4;    // kConservativeLr pairs with pretrained-scale setups
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double r = 0.4;      // bootstrapped-CE keep ratio, in (0, 1]
  double w_ce = 1.0, w_dice = 1.0;
  std::uint64_t seed = 0;
  Index eval_every = 0;  // validate every k steps; 0 disables
  Index warmup = 0;      // linear lr ramp over the first `warmup` steps
  double lr_final = -1.0;  // cosine-decay target after warmup; negative = constant lr
  /// Escape hatch: store only value copies in the memory so gradients never
  /// cross frame boundaries. Default trains through the full window.
  bool detach_memory = false;

  void validate() const;  // ConfigError on violation
};

constexpr double kConservativeLr = 1e-5;

/// Adam over every model parameter. step() applies the accumulated leaf
/// gradients with bias correction, then clears them.
class Adam {
 public:
  Adam(Model& model, const TrainConfig& config);
  void step();
  Index steps_taken() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<ArrayXd> m_, v_;
  double lr_, b1_, b2_, eps_;
  Index t_ = 0;
};

/// Loss of one training window: the inference pipeline runs frame by frame
/// with the memory built from the *predicted* masks, and every frame's
/// logits are scored against ground truth. total = sum over frames of
/// w_ce * bootstrapped-CE + w_dice * dice (differentiable scalar); ce/dice
/// hold the unweighted per-window sums for logging.
struct WindowLoss {
  Tensor total;
  double ce = 0.0, dice = 0.0;
};

WindowLoss window_loss(const Model& model, const VideoSample& window,
                       const PointSet& points, const TrainConfig& config,
                       const RunFlags& flags);

/// Frames [start, start + t) of a sample as a standalone sample. The cut
/// window keeps the flow-multiplexing rule: its frame-1 flow is a copy of
/// its frame-2 flow.
VideoSample sample_window(const VideoSample& full, Index start, Index t);

/// Deterministic evaluation: per sample, clicks are generated from
/// click_seed and the sample index, the model segments the sequence, and the
/// predictions are scored against ground truth.
EvalReport score_dataset(const Model& model, const std::vector<VideoSample>& data,
                         const RunFlags& flags, std::uint64_t click_seed,
                         const EvalOptions& eval_options = {});

/// Learning rate at 0-based `step`: linear ramp from lr/warmup to lr across
/// the warmup steps, then either constant (lr_final < 0) or cosine decay
/// from lr to lr_final over the remaining steps.
double scheduled_lr(const TrainConfig& config, Index step);

struct StepLog {
  Index step = 0;
  double ce = 0.0, dice = 0.0, total = 0.0;
  double val_j = -1.0, val_f = -1.0;  // -1 when this step ran no validation
};

struct TrainResult {
  std::vector<StepLog> log;
  bool diverged = false;
  /// Last step whose loss was finite; -1 when the very first step diverged.
  Index last_good_step = -1;
};

/// Optimizes the model in place. Per step: `batch` windows are sampled
/// (uniform sample, uniform start, fresh clicks from the run rng), each
/// backpropagated under its own tape with gradients accumulated, then one
/// Adam update. A non-finite loss aborts the run: parameters roll back to
/// the last verified-good state and that state is saved to checkpoint_path.
/// A clean run saves the final parameters to checkpoint_path. Both paths
/// append the step log to csv_path. Empty paths skip the corresponding
/// output. Runs are bit-for-bit reproducible for a fixed config.
TrainResult train(Model& model, const std::vector<VideoSample>& train_data,
                  const std::vector<VideoSample>& val_data, const TrainConfig& config,
                  const RunFlags& flags, const std::filesystem::path& checkpoint_path = {},
                  const std::filesystem::path& csv_path = {});

}  // namespace clickseg

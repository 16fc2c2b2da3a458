#include "clickseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <fstream>
#include <limits>

#include "clickseg/graph.hpp"

namespace clickseg {

namespace {

Tensor detach(const Tensor& t) { return Tensor::from_array(t.shape(), t.array()); }

void detach_token_set(TokenSet& tokens) {
  tokens.z = detach(tokens.z);
  tokens.z_id = detach(tokens.z_id);
}

NamedTensors snapshot(const Model& model) {
  NamedTensors copy;
  copy.reserve(model.params().size());
  for (const auto& [name, tensor] : model.params())
    copy.emplace_back(name, Tensor::from_array(tensor.shape(), tensor.array()));
  return copy;
}

void restore(Model& model, const NamedTensors& saved) {
  for (std::size_t i = 0; i < saved.size(); ++i)
    model.params()[i].second.mutable_array() = saved[i].second.array();
}

std::vector<Index> point_ids(const PointSet& points) {
  std::vector<Index> ids;
  ids.reserve(points.points.size());
  for (const auto& p : points.points) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

void TrainConfig::validate() const {
  if (t_train < 2) throw ConfigError("t_train must be at least 2, got " + std::to_string(t_train));
  if (batch < 1) throw ConfigError("batch must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (!(r > 0.0) || r > 1.0)
    throw ConfigError("bootstrap ratio must lie in (0, 1], got " + std::to_string(r));
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (eps <= 0.0) throw ConfigError("Adam epsilon must be positive");
  if (w_ce < 0.0 || w_dice < 0.0) throw ConfigError("loss weights must be non-negative");
  if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
  if (warmup < 0) throw ConfigError("warmup must be non-negative");
  if (lr_final > lr)
    throw ConfigError("lr_final must not exceed lr (decay schedule, not a ramp)");
}

Adam::Adam(Model& model, const TrainConfig& config)
    : lr_(config.lr), b1_(config.beta1), b2_(config.beta2), eps_(config.eps) {
  for (auto& [name, tensor] : model.params()) {
    params_.push_back(tensor);
    m_.emplace_back(ArrayXd::Zero(tensor.size()));
    v_.emplace_back(ArrayXd::Zero(tensor.size()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const ArrayXd& g = p.grad();
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.square();
    p.mutable_array() -= lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps_);
    p.zero_grad();
  }
}

double scheduled_lr(const TrainConfig& config, Index step) {
  if (step < config.warmup)
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup);
  if (config.lr_final < 0.0) return config.lr;
  const Index span = std::max<Index>(1, config.steps - config.warmup - 1);
  const double progress =
      std::min(1.0, static_cast<double>(step - config.warmup) / static_cast<double>(span));
  return config.lr_final +
         0.5 * (config.lr - config.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

VideoSample sample_window(const VideoSample& full, Index start, Index t) {
  if (t < 1 || start < 0 || start + t > full.t)
    throw ShapeError("window [" + std::to_string(start) + ", " + std::to_string(start + t) +
                     ") does not fit a " + std::to_string(full.t) + "-frame sample");
  VideoSample window;
  window.h = full.h;
  window.w = full.w;
  window.t = t;
  window.object_ids = full.object_ids;
  window.seed = full.seed;
  window.occlusion = full.occlusion;
  for (Index i = 0; i < t; ++i) {
    window.frames.push_back(full.frames[static_cast<std::size_t>(start + i)]);
    window.masks.push_back(full.masks[static_cast<std::size_t>(start + i)]);
    window.flows.push_back(full.flows[static_cast<std::size_t>(start + i)]);
  }
  // the cut's first frame has no incoming motion; reuse its successor's flow
  if (t > 1) window.flows[0] = window.flows[1];
  return window;
}

WindowLoss window_loss(const Model& model, const VideoSample& window,
                       const PointSet& points, const TrainConfig& config,
                       const RunFlags& flags) {
  if (window.t < 1 || window.masks.size() != static_cast<std::size_t>(window.t))
    throw ShapeError("training window needs a ground-truth mask per frame");
  const std::vector<Index> ids = point_ids(points);

  MemoryState mem;
  WindowLoss out;
  Tensor total;
  for (Index t = 0; t < window.t; ++t) {
    Tensor img = frame_to_tensor(window.frames[static_cast<std::size_t>(t)]);
    Tensor flo = flow_image_tensor(window.flows[static_cast<std::size_t>(t)],
                                   model.config().flow_vmax);
    FeatureMap ft = model.encode_bimodal(img, flo);

    if (t == 0) mem.object = {model.point_tokenize(ft, points)};
    Tensor e = model.segment_attention(ft, mem.keys(), mem.values());
    DecodeResult dec = model.decode_mask(e, ft);

    const Mask& gt = window.masks[static_cast<std::size_t>(t)];
    Tensor ce = loss_bootstrapped_ce(dec.logits, gt, config.r);
    Tensor dice = loss_dice(dec.logits, gt);
    Tensor frame_total = scalar_mul(ce, config.w_ce) + scalar_mul(dice, config.w_dice);
    total = total.defined() ? total + frame_total : frame_total;
    out.ce += ce.item();
    out.dice += dice.item();

    // the memory grows from the model's own predictions, as at test time
    TokenSet pooled = model.mask_pool(ft, dec.mask, ids);
    DenseTokens dense = model.make_dense_tokens(ft, dec.mask);
    if (config.detach_memory) {
      detach_token_set(pooled);
      dense.z = detach(dense.z);
      dense.z_id = detach(dense.z_id);
    }
    model.memory_update(mem, pooled, dense, flags, t == 0);
    if (config.detach_memory && t == 0)
      for (auto& ts : mem.object) detach_token_set(ts);  // lingering point tokens
  }
  out.total = total;
  return out;
}

EvalReport score_dataset(const Model& model, const std::vector<VideoSample>& data,
                         const RunFlags& flags, std::uint64_t click_seed,
                         const EvalOptions& eval_options) {
  std::vector<std::vector<Mask>> pred, gt;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const VideoSample& sample = data[i];
    const PointSet points =
        annotate_first_frame(sample.masks[0], hash_mix(click_seed, i, 0x5eedULL));
    InferResult res = model.infer_video(sample, points, flags);
    pred.push_back(std::move(res.masks));
    gt.push_back(sample.masks);
    names.push_back("seq" + std::to_string(i));
  }
  return evaluate(pred, gt, names, eval_options);
}

TrainResult train(Model& model, const std::vector<VideoSample>& train_data,
                  const std::vector<VideoSample>& val_data, const TrainConfig& config,
                  const RunFlags& flags, const std::filesystem::path& checkpoint_path,
                  const std::filesystem::path& csv_path) {
  config.validate();
  if (train_data.empty()) throw ConfigError("training needs at least one sample");
  for (const auto& s : train_data)
    if (s.t < config.t_train)
      throw ConfigError("sample with " + std::to_string(s.t) +
                        " frames cannot host a " + std::to_string(config.t_train) +
                        "-frame window");

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    if (!csv) throw FormatError("cannot write log: " + csv_path.string());
    csv << "step,ce,dice,total,val_J,val_F\n";
  }
  auto log_row = [&](const StepLog& row) {
    if (!csv.is_open()) return;
    csv << row.step << ',' << row.ce << ',' << row.dice << ',' << row.total << ',';
    if (row.val_j >= 0.0) csv << row.val_j;
    csv << ',';
    if (row.val_f >= 0.0) csv << row.val_f;
    csv << '\n';
  };

  Rng rng(config.seed);
  Adam opt(model, config);
  TrainResult result;
  NamedTensors good = snapshot(model);

  const auto diverge = [&](Index step) {
    restore(model, good);
    if (!checkpoint_path.empty()) model.save_weights(checkpoint_path);
    result.diverged = true;
    StepLog row;
    row.step = step;
    row.ce = row.dice = row.total = std::numeric_limits<double>::quiet_NaN();
    result.log.push_back(row);
    log_row(row);
  };

  for (Index step = 0; step < config.steps; ++step) {
    for (auto& [name, p] : model.params()) p.zero_grad();

    StepLog row;
    row.step = step;
    bool finite = true;
    for (Index b = 0; b < config.batch && finite; ++b) {
      const VideoSample& sample =
          train_data[rng.below(static_cast<std::uint64_t>(train_data.size()))];
      const Index start =
          static_cast<Index>(rng.below(static_cast<std::uint64_t>(sample.t - config.t_train + 1)));
      const VideoSample window = sample_window(sample, start, config.t_train);
      const PointSet points = annotate_first_frame(window.masks[0], rng.next_u64());

      try {
        Graph tape;
        WindowLoss wl = window_loss(model, window, points, config, flags);
        if (!std::isfinite(wl.total.item())) {
          finite = false;
          break;
        }
        tape.backward(scalar_mul(wl.total, 1.0 / static_cast<double>(config.batch)));
        row.ce += wl.ce / static_cast<double>(config.batch);
        row.dice += wl.dice / static_cast<double>(config.batch);
        row.total += (config.w_ce * wl.ce + config.w_dice * wl.dice) /
                     static_cast<double>(config.batch);
      } catch (const NumericError&) {
        finite = false;
      }
    }
    if (!finite) {
      diverge(step);
      return result;
    }

    // these parameters produced a finite loss: they are the rollback target
    good = snapshot(model);
    result.last_good_step = step;
    opt.set_lr(scheduled_lr(config, step));
    opt.step();

    if (config.eval_every > 0 && !val_data.empty() && (step + 1) % config.eval_every == 0) {
      const EvalReport report = score_dataset(model, val_data, flags, config.seed);
      row.val_j = report.j;
      row.val_f = report.f;
    }
    result.log.push_back(row);
    log_row(row);
  }

  if (!checkpoint_path.empty()) model.save_weights(checkpoint_path);
  return result;
}

}  // namespace clickseg

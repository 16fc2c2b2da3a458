#include <doctest.h>

#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "clickseg/graph.hpp"
#include "clickseg/synthetic.hpp"
#include "clickseg/trainer.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

ModelConfig trainer_model_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.n_heads = 2;
  cfg.stride = 4;
  cfg.n_max = 4;
  return cfg;
}

SceneSpec tiny_scene(std::uint64_t seed, double cx, double cy, double vx, double vy) {
  SceneSpec spec;
  spec.h = 16;
  spec.w = 16;
  spec.t = 4;
  spec.seed = seed;
  spec.background_seed = seed + 1;
  ObjectSpec obj;
  obj.cx = cx;
  obj.cy = cy;
  obj.rx = 3.0;
  obj.ry = 3.0;
  obj.vx = vx;
  obj.vy = vy;
  obj.color[0] = 0.9;
  obj.color[1] = 0.15;
  obj.color[2] = 0.1;
  spec.objects.push_back(obj);
  return spec;
}

std::vector<VideoSample> tiny_dataset() {
  return {gen_sequence(tiny_scene(301, 6.0, 8.0, 1.0, 0.0)),
          gen_sequence(tiny_scene(313, 9.0, 7.0, -1.0, 1.0))};
}

double group_grad_norm(const Model& model, const std::string& prefix) {
  double acc = 0.0;
  for (const auto& [name, p] : model.params()) {
    if (name.rfind(prefix, 0) != 0 || !p.has_grad()) continue;
    acc += p.grad().abs().sum();
  }
  return acc;
}

double max_param_diff(const Model& a, const Model& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    worst = std::max(worst,
                     (a.params()[i].second.array() - b.params()[i].second.array())
                         .abs()
                         .maxCoeff());
  return worst;
}

}  // namespace

TEST_CASE("training configuration invariants") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.r = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.r = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.t_train = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.w_dice = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.warmup = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.lr_final = bad.lr * 2.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("the learning-rate schedule matches its closed form") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.steps = 100;

  // default: constant
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(cfg, 99) == doctest::Approx(1e-3));

  // warmup ramps linearly and reaches lr exactly at its last step
  cfg.warmup = 10;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(1e-4));
  CHECK(scheduled_lr(cfg, 4) == doctest::Approx(5e-4));
  CHECK(scheduled_lr(cfg, 9) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(cfg, 10) == doctest::Approx(1e-3));  // constant after ramp

  // cosine decay: starts at lr after warmup, hits the midpoint halfway,
  // lands on lr_final at the final step
  cfg.lr_final = 2e-4;
  const Index last = cfg.steps - 1;
  const Index mid = cfg.warmup + (cfg.steps - 1 - cfg.warmup) / 2;
  CHECK(scheduled_lr(cfg, cfg.warmup) == doctest::Approx(1e-3));
  CHECK(scheduled_lr(cfg, mid) ==
        doctest::Approx(2e-4 + 0.5 * (1e-3 - 2e-4) *
                                   (1.0 + std::cos(std::numbers::pi * (mid - cfg.warmup) /
                                                   double(last - cfg.warmup)))));
  CHECK(scheduled_lr(cfg, last) == doctest::Approx(2e-4));
  // never above lr; never below lr_final once the warmup ramp is over
  for (Index s = 0; s < cfg.steps; ++s) {
    CHECK(scheduled_lr(cfg, s) <= 1e-3 + 1e-15);
    if (s >= cfg.warmup) CHECK(scheduled_lr(cfg, s) >= 2e-4 - 1e-15);
  }
}

TEST_CASE("window cutting keeps frames aligned and re-multiplexes the first flow") {
  const VideoSample full = gen_sequence(tiny_scene(401, 6.0, 8.0, 1.0, 0.0));
  REQUIRE(full.t == 4);

  const VideoSample window = sample_window(full, 1, 3);
  CHECK(window.t == 3);
  CHECK(window.frames[0].data == full.frames[1].data);
  CHECK(window.frames[2].data == full.frames[3].data);
  CHECK(window.masks[1].data == full.masks[2].data);
  // interior flows line up with the source sequence
  CHECK(window.flows[1].data == full.flows[2].data);
  CHECK(window.flows[2].data == full.flows[3].data);
  // the cut's first frame reuses its successor's flow, like a fresh sequence
  CHECK(window.flows[0].data == window.flows[1].data);

  CHECK_THROWS_AS(sample_window(full, 2, 3), ShapeError);
  CHECK_THROWS_AS(sample_window(full, -1, 2), ShapeError);
  CHECK_THROWS_AS(sample_window(full, 0, 0), ShapeError);
}

TEST_CASE("fresh models sit at the uniform-predictor loss") {
  const std::vector<VideoSample> data = tiny_dataset();

  TrainConfig cfg;
  cfg.t_train = 2;
  cfg.batch = 1;
  cfg.steps = 100;
  cfg.lr = 1e-12;  // freeze the parameters so every step samples the start loss
  cfg.r = 1.0;
  cfg.seed = 77;

  Rng rng(501);
  Model model(trainer_model_config(), rng);
  TrainResult result = train(model, data, {}, cfg, RunFlags{});
  REQUIRE(result.log.size() == 100);
  CHECK_FALSE(result.diverged);

  double mean_ce = 0.0, mean_dice = 0.0;
  for (const auto& row : result.log) {
    mean_ce += row.ce;
    mean_dice += row.dice;
  }
  mean_ce /= 100.0 * static_cast<double>(cfg.t_train);
  mean_dice /= 100.0 * static_cast<double>(cfg.t_train);

  // uniform probabilities make every pixel's CE exactly ln(n_max)
  const double ce_baseline = std::log(4.0);
  CHECK(mean_ce == doctest::Approx(ce_baseline).epsilon(0.20));

  // dice baseline for the uniform predictor, estimated on the same window
  // distribution with an independent stream
  Rng probe(909);
  double dice_baseline = 0.0;
  const int trials = 200;
  for (int i = 0; i < trials; ++i) {
    const VideoSample& s = data[probe.below(data.size())];
    const Index start = static_cast<Index>(probe.below(static_cast<std::uint64_t>(s.t - 1)));
    const Mask& gt = s.masks[static_cast<std::size_t>(start + static_cast<Index>(probe.below(2)))];
    dice_baseline += loss_dice(Tensor::zeros({16, 16, 4}), gt).item();
  }
  dice_baseline /= static_cast<double>(trials);
  CHECK(mean_dice == doctest::Approx(dice_baseline).epsilon(0.20));
}

TEST_CASE("training runs are reproducible bit for bit") {
  const std::vector<VideoSample> data = tiny_dataset();
  const std::vector<VideoSample> val = {data[0]};

  TrainConfig cfg;
  cfg.t_train = 2;
  cfg.batch = 2;
  cfg.steps = 3;
  cfg.seed = 99;
  cfg.eval_every = 2;

  Rng rng_a(601);
  Model a(trainer_model_config(), rng_a);
  TrainResult ra = train(a, data, val, cfg, RunFlags{});

  Rng rng_b(601);
  Model b(trainer_model_config(), rng_b);
  TrainResult rb = train(b, data, val, cfg, RunFlags{});

  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].ce == rb.log[i].ce);
    CHECK(ra.log[i].dice == rb.log[i].dice);
    CHECK(ra.log[i].total == rb.log[i].total);
    CHECK(ra.log[i].val_j == rb.log[i].val_j);
    CHECK(ra.log[i].val_f == rb.log[i].val_f);
    // the logged total is the weighted sum of its parts
    CHECK(ra.log[i].total ==
          doctest::Approx(ra.log[i].ce + ra.log[i].dice).epsilon(1e-12));
  }
  CHECK(max_param_diff(a, b) == 0.0);

  // validation fields appear exactly on the eval cadence
  CHECK(ra.log[0].val_j == -1.0);
  CHECK(ra.log[1].val_j >= 0.0);
  CHECK(ra.log[1].val_f >= 0.0);
  CHECK(ra.log[2].val_j == -1.0);
}

TEST_CASE("losses actually decrease over a short run") {
  const std::vector<VideoSample> data = tiny_dataset();
  TrainConfig cfg;
  cfg.t_train = 2;
  cfg.batch = 2;
  cfg.steps = 30;
  cfg.lr = 3e-3;
  cfg.seed = 21;

  Rng rng(701);
  Model model(trainer_model_config(), rng);
  TrainResult result = train(model, data, {}, cfg, RunFlags{});
  REQUIRE(result.log.size() == 30);

  double early = 0.0, late = 0.0;
  for (int i = 0; i < 5; ++i) {
    early += result.log[static_cast<std::size_t>(i)].total;
    late += result.log[static_cast<std::size_t>(25 + i)].total;
  }
  CHECK(late < early);
}

TEST_CASE("one backward pass reaches every parameter group") {
  const std::vector<VideoSample> data = tiny_dataset();
  Rng rng(801);
  Model model(trainer_model_config(), rng);

  TrainConfig cfg;
  cfg.t_train = 2;

  const VideoSample window = sample_window(data[0], 0, 2);
  const PointSet points = annotate_first_frame(window.masks[0], 31);

  Graph tape;
  WindowLoss wl = window_loss(model, window, points, cfg, RunFlags{});
  tape.backward(wl.total);

  for (const char* group : {"encoder.", "bank.", "segattn.", "decoder."}) {
    INFO("group: " << group);
    CHECK(group_grad_norm(model, group) > 0.0);
  }
  // both encoder branches and both attention sites contribute
  CHECK(group_grad_norm(model, "encoder.flow.") > 0.0);
  CHECK(group_grad_norm(model, "encoder.img.") > 0.0);
  CHECK(group_grad_norm(model, "encoder.fuse.") > 0.0);
  CHECK(group_grad_norm(model, "segattn.cross.") > 0.0);
}

TEST_CASE("trimmed bootstrapped loss dominates the full mean on a fixed window") {
  const std::vector<VideoSample> data = tiny_dataset();
  Rng rng(901);
  Model model(trainer_model_config(), rng);

  const VideoSample window = sample_window(data[1], 1, 2);
  const PointSet points = annotate_first_frame(window.masks[0], 47);

  TrainConfig full;
  full.t_train = 2;
  full.r = 1.0;
  TrainConfig trimmed = full;
  trimmed.r = 0.4;

  const double ce_full = window_loss(model, window, points, full, RunFlags{}).ce;
  const double ce_trimmed = window_loss(model, window, points, trimmed, RunFlags{}).ce;
  CHECK(ce_trimmed >= ce_full - 1e-12);
}

TEST_CASE("detached memory still trains but blocks cross-frame gradients") {
  const std::vector<VideoSample> data = tiny_dataset();
  Rng rng(1001);
  Model model(trainer_model_config(), rng);

  TrainConfig cfg;
  cfg.t_train = 3;
  cfg.detach_memory = true;

  const VideoSample window = sample_window(data[0], 0, 3);
  const PointSet points = annotate_first_frame(window.masks[0], 53);

  Graph tape;
  WindowLoss wl = window_loss(model, window, points, cfg, RunFlags{});
  CHECK(std::isfinite(wl.total.item()));
  tape.backward(wl.total);
  CHECK(group_grad_norm(model, "encoder.") > 0.0);
  CHECK(group_grad_norm(model, "decoder.") > 0.0);
}

TEST_CASE("a non-finite loss rolls back to the last good parameters") {
  const fs::path dir = fs::temp_directory_path() / "clickseg_test_diverge";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "rescued.ckpt";

  const std::vector<VideoSample> data = tiny_dataset();
  Rng rng(1101);
  Model model(trainer_model_config(), rng);

  // reference copy of the starting parameters
  Rng rng_ref(1101);
  Model reference(trainer_model_config(), rng_ref);
  REQUIRE(max_param_diff(model, reference) == 0.0);

  TrainConfig cfg;
  cfg.t_train = 2;
  cfg.batch = 1;
  cfg.steps = 5;
  cfg.seed = 3;

  // sabotage backward: matmul gradients blow up, Adam turns the parameters
  // non-finite, and the next forward pass trips the divergence detector
  Graph::set_backward_fault(OpKind::kMatMul, 1e308);
  TrainResult result = train(model, data, {}, cfg, RunFlags{}, ckpt);
  Graph::clear_backward_fault();

  CHECK(result.diverged);
  CHECK(result.last_good_step == 0);
  REQUIRE(fs::exists(ckpt));

  // the model holds the pre-explosion parameters again (the initial ones,
  // since the first update was the poisoned one)
  CHECK(max_param_diff(model, reference) == 0.0);
  for (const auto& [name, p] : model.params()) CHECK(p.array().isFinite().all());

  // the saved rescue checkpoint matches too
  Rng rng_loaded(9999);
  Model loaded(trainer_model_config(), rng_loaded);
  loaded.load_weights(ckpt);
  CHECK(max_param_diff(loaded, reference) == 0.0);

  fs::remove_all(dir);
}

TEST_CASE("the metrics log lands on disk as CSV") {
  const fs::path dir = fs::temp_directory_path() / "clickseg_test_traincsv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path csv = dir / "log.csv";
  const fs::path ckpt = dir / "final.ckpt";

  const std::vector<VideoSample> data = tiny_dataset();
  TrainConfig cfg;
  cfg.t_train = 2;
  cfg.batch = 1;
  cfg.steps = 4;
  cfg.seed = 5;
  cfg.eval_every = 2;

  Rng rng(1201);
  Model model(trainer_model_config(), rng);
  train(model, data, {data[1]}, cfg, RunFlags{}, ckpt, csv);

  REQUIRE(fs::exists(csv));
  std::ifstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,ce,dice,total,val_J,val_F");
  int rows = 0;
  int with_val = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() >= 4);
    if (fields.size() >= 5 && !fields[4].empty()) ++with_val;
  }
  CHECK(rows == 4);
  CHECK(with_val == 2);  // steps 2 and 4 on the eval-every-2 cadence

  // the checkpoint written at the end reproduces the trained model
  Rng rng2(1301);
  Model loaded(trainer_model_config(), rng2);
  loaded.load_weights(ckpt);
  CHECK(max_param_diff(loaded, model) == 0.0);

  fs::remove_all(dir);
}

TEST_CASE("training rejects impossible setups") {
  const std::vector<VideoSample> data = tiny_dataset();
  Rng rng(1401);
  Model model(trainer_model_config(), rng);

  TrainConfig cfg;
  cfg.steps = 1;
  cfg.t_train = 9;  // longer than the 4-frame samples
  CHECK_THROWS_AS(train(model, data, {}, cfg, RunFlags{}), ConfigError);

  cfg.t_train = 2;
  CHECK_THROWS_AS(train(model, {}, {}, cfg, RunFlags{}), ConfigError);
}

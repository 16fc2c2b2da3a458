// Command-line front end: data generation, annotation, training, inference,
// the point-tracking baseline, evaluation, overlay rendering, and the
// corrupted-first-frame recovery suite.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clickseg/annotate.hpp"
#include "clickseg/baseline.hpp"
#include "clickseg/metrics.hpp"
#include "clickseg/model.hpp"
#include "clickseg/synthetic.hpp"
#include "clickseg/trainer.hpp"
#include "clickseg/video.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clickseg;

namespace {

// Seed-stream salts. Annotation and --points auto share kClickSalt so that
// `annotate --seed S` followed by `--points file` reproduces `--points auto
// --seed S` exactly.
constexpr std::uint64_t kGenSalt = 0x6e5dULL;
constexpr std::uint64_t kClickSalt = 0xc11cULL;
constexpr std::uint64_t kCorruptSalt = 0xc0bbULL;
constexpr std::uint64_t kInitSalt = 0x1417ULL;

std::vector<fs::path> sequence_dirs(const fs::path& root) {
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty())
    throw FormatError("no sequence directories under " + root.string());
  return dirs;
}

// Mask folders come in two layouts: a dataset directory (masks live in a
// masks/ subfolder next to frames/) or a bare prediction directory of .pgm
// files. Accept either.
std::vector<Mask> read_mask_dir(const fs::path& dir) {
  if (fs::is_directory(dir / "masks")) return read_masks(dir / "masks");
  return read_masks(dir);
}

template <typename Fn>
void run_jobs(Index n, int jobs, Fn&& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const Index i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first_error) first_error = std::current_exception();
          next.store(n);
          return;
        }
      }
    });
  for (auto& worker : pool) worker.join();
  if (first_error) std::rethrow_exception(first_error);
}

PointSet points_for(const VideoSample& sample, const std::string& mode,
                    const fs::path& seq_dir, std::uint64_t seed, Index index) {
  if (mode == "auto")
    return annotate_first_frame(sample.masks[0], hash_mix(seed, static_cast<std::uint64_t>(index), kClickSalt));
  if (mode == "file")
    return load_points(seq_dir / "points.json", sample.w, sample.h);
  throw ConfigError("--points must be 'auto' or 'file', got '" + mode + "'");
}

bool parse_on_off(const std::string& s, const char* flag) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw ConfigError(std::string(flag) + " must be 'on' or 'off', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config file: one flat JSON object whose keys mirror the ModelConfig,
// TrainConfig, and RunFlags field names. Command-line flags override it.

struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
  RunFlags flags;
};

void apply_config_file(const fs::path& path, TrainSetup& setup) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("config file " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config file must hold one JSON object");

  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "channels") setup.model.channels = value.get<Index>();
      else if (key == "n_heads") setup.model.n_heads = value.get<Index>();
      else if (key == "stride") setup.model.stride = value.get<Index>();
      else if (key == "n_max") setup.model.n_max = value.get<Index>();
      else if (key == "flow_vmax") setup.model.flow_vmax = value.get<double>();
      else if (key == "modality") setup.model.modality = modality_from_string(value.get<std::string>());
      else if (key == "t_train") setup.train.t_train = value.get<Index>();
      else if (key == "batch") setup.train.batch = value.get<Index>();
      else if (key == "steps") setup.train.steps = value.get<Index>();
      else if (key == "lr") setup.train.lr = value.get<double>();
      else if (key == "beta1") setup.train.beta1 = value.get<double>();
      else if (key == "beta2") setup.train.beta2 = value.get<double>();
      else if (key == "eps") setup.train.eps = value.get<double>();
      else if (key == "r") setup.train.r = value.get<double>();
      else if (key == "w_ce") setup.train.w_ce = value.get<double>();
      else if (key == "w_dice") setup.train.w_dice = value.get<double>();
      else if (key == "seed") setup.train.seed = value.get<std::uint64_t>();
      else if (key == "eval_every") setup.train.eval_every = value.get<Index>();
      else if (key == "warmup") setup.train.warmup = value.get<Index>();
      else if (key == "lr_final") setup.train.lr_final = value.get<double>();
      else if (key == "detach_memory") setup.train.detach_memory = value.get<bool>();
      else if (key == "objmem") setup.flags.objmem = objmem_from_string(value.get<std::string>());
      else if (key == "densemem") setup.flags.densemem = value.get<bool>();
      else throw ConfigError("config file has unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string out;
  Index num = 10;
  std::string hw = "64,64";
  Index frames = 8;
  int objects = 2;
  std::uint64_t seed = 0;
  Index occlude_every = 3;
  int jobs = 1;
};

int cmd_gen_data(const GenArgs& args) {
  const auto comma = args.hw.find(',');
  Index h = 0, w = 0;
  try {
    if (comma == std::string::npos) throw std::invalid_argument("no comma");
    h = std::stoll(args.hw.substr(0, comma));
    w = std::stoll(args.hw.substr(comma + 1));
  } catch (const std::exception&) {
    throw ConfigError("--hw expects H,W (e.g. 64,64), got '" + args.hw + "'");
  }
  if (args.num < 1) throw ConfigError("--num must be positive");

  fs::create_directories(args.out);
  run_jobs(args.num, args.jobs, [&](Index i) {
    Rng rng(hash_mix(args.seed, static_cast<std::uint64_t>(i), kGenSalt));
    const bool occlude = args.occlude_every > 0 && i % args.occlude_every == 0;
    const VideoSample sample =
        gen_sequence(random_scene(rng, h, w, args.frames, args.objects, occlude));
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04lld", static_cast<long long>(i));
    write_sample(sample, fs::path(args.out) / name);
  });
  std::printf("wrote %lld sequences (%lldx%lld, %lld frames, %d objects) to %s\n",
              static_cast<long long>(args.num), static_cast<long long>(h),
              static_cast<long long>(w), static_cast<long long>(args.frames),
              args.objects, args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// annotate

int cmd_annotate(const std::string& data, std::uint64_t seed) {
  const std::vector<fs::path> dirs = sequence_dirs(data);
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const Mask first = read_pgm(dirs[i] / "masks" / "000001.pgm");
    const PointSet points =
        annotate_first_frame(first, hash_mix(seed, static_cast<std::uint64_t>(i), kClickSalt));
    save_points(dirs[i] / "points.json", points);
  }
  std::printf("annotated %zu sequences under %s\n", dirs.size(), data.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

std::vector<VideoSample> load_dataset(const std::string& root) {
  const std::vector<fs::path> dirs = sequence_dirs(root);
  std::vector<VideoSample> samples;
  samples.reserve(dirs.size());
  for (const auto& dir : dirs) samples.push_back(read_sample(dir));
  return samples;
}

int cmd_train(const TrainSetup& setup, const std::string& data, const std::string& val_data,
              const std::string& out, std::string log_path) {
  const std::vector<VideoSample> train_set = load_dataset(data);
  std::vector<VideoSample> val_set;
  if (!val_data.empty()) val_set = load_dataset(val_data);
  if (setup.train.eval_every > 0 && val_set.empty())
    throw ConfigError("--eval-every needs --val-data");

  Rng init(hash_mix(setup.train.seed, 0, kInitSalt));
  Model model(setup.model, init);
  if (log_path.empty()) log_path = fs::path(out).replace_extension(".csv").string();
  for (const auto& target : {fs::path(out), fs::path(log_path)})
    if (target.has_parent_path()) fs::create_directories(target.parent_path());

  const TrainResult result =
      train(model, train_set, val_set, setup.train, setup.flags, out, log_path);

  if (!result.log.empty()) {
    const StepLog& last = result.log.back();
    std::printf("step %lld: ce %.4f dice %.4f total %.4f\n",
                static_cast<long long>(last.step), last.ce, last.dice, last.total);
    for (auto it = result.log.rbegin(); it != result.log.rend(); ++it)
      if (it->val_j >= 0) {
        std::printf("last validation: J %.4f F %.4f J&F %.4f\n", it->val_j, it->val_f,
                    0.5 * (it->val_j + it->val_f));
        break;
      }
  }
  std::printf("checkpoint: %s\nmetrics: %s\n", out.c_str(), log_path.c_str());
  if (result.diverged) {
    std::fprintf(stderr,
                 "error: training diverged; checkpoint restored from step %lld\n",
                 static_cast<long long>(result.last_good_step));
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string ckpt, data, out;
  std::string points = "auto";
  std::string objmem = "all", densemem = "on", modality;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int cmd_infer(const InferArgs& args) {
  const Model model = Model::load(args.ckpt);
  if (!args.modality.empty() &&
      modality_from_string(args.modality) != model.config().modality)
    throw ConfigError("checkpoint was trained with modality '" +
                      to_string(model.config().modality) + "'");
  RunFlags flags;
  flags.objmem = objmem_from_string(args.objmem);
  flags.densemem = parse_on_off(args.densemem, "--densemem");

  const std::vector<fs::path> dirs = sequence_dirs(args.data);
  fs::create_directories(args.out);
  std::mutex mu;
  run_jobs(static_cast<Index>(dirs.size()), args.jobs, [&](Index i) {
    const VideoSample sample = read_sample(dirs[i]);
    const PointSet points = points_for(sample, args.points, dirs[i], args.seed, i);
    const InferResult result = model.infer_video(sample, points, flags);
    write_masks(result.masks, fs::path(args.out) / dirs[i].filename());
    std::lock_guard lock(mu);
    for (const auto& warning : result.warnings)
      std::fprintf(stderr, "%s: %s\n", dirs[i].filename().c_str(), warning.c_str());
  });
  std::printf("inferred %zu sequences -> %s\n", dirs.size(), args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// baseline

int cmd_baseline(const std::string& data, const std::string& points_mode,
                 std::uint64_t seed, double tau, const std::string& out, int jobs) {
  const std::vector<fs::path> dirs = sequence_dirs(data);
  fs::create_directories(out);
  run_jobs(static_cast<Index>(dirs.size()), jobs, [&](Index i) {
    const VideoSample sample = read_sample(dirs[i]);
    const PointSet points = points_for(sample, points_mode, dirs[i], seed, i);
    write_masks(run_baseline(sample, points, tau), fs::path(out) / dirs[i].filename());
  });
  std::printf("baseline on %zu sequences -> %s\n", dirs.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& pred_root, const std::string& gt_root,
             bool first_frame_only, bool exclude_first, int tolerance,
             const std::string& out) {
  const std::vector<fs::path> gt_dirs = sequence_dirs(gt_root);

  std::vector<std::string> names;
  std::vector<std::vector<Mask>> pred, gt;
  std::vector<std::string> gaps;
  for (const auto& dir : gt_dirs) {
    const std::string name = dir.filename().string();
    const fs::path pred_dir = fs::path(pred_root) / name;
    if (!fs::is_directory(pred_dir)) {
      gaps.push_back(name + ": no predictions");
      continue;
    }
    std::vector<Mask> p = read_mask_dir(pred_dir);
    std::vector<Mask> g = read_mask_dir(dir);
    if (p.size() != g.size()) {
      gaps.push_back(name + ": " + std::to_string(p.size()) + " predicted frames vs " +
                     std::to_string(g.size()) + " ground-truth frames");
      continue;
    }
    names.push_back(name);
    pred.push_back(std::move(p));
    gt.push_back(std::move(g));
  }
  if (!gaps.empty()) {
    std::fprintf(stderr, "error: prediction/ground-truth mismatch:\n");
    for (const auto& gap : gaps) std::fprintf(stderr, "  %s\n", gap.c_str());
    return 2;
  }

  EvalOptions options;
  options.first_frame_only = first_frame_only;
  options.include_first = !exclude_first;
  options.tolerance = tolerance;
  const EvalReport report = evaluate(pred, gt, names, options);
  if (!out.empty()) write_eval_csv(out, report);
  std::printf("J %.4f  F %.4f  J&F %.4f  (%zu sequences)\n", report.j, report.f,
              report.jandf, names.size());
  return 0;
}

// ---------------------------------------------------------------------------
// overlay

void blend_label(Frame& frame, Index y, Index x, int label) {
  static constexpr double kPalette[8][3] = {
      {0.90, 0.10, 0.29}, {0.24, 0.71, 0.29}, {1.00, 0.88, 0.10}, {0.00, 0.51, 0.78},
      {0.96, 0.51, 0.19}, {0.57, 0.12, 0.71}, {0.27, 0.94, 0.94}, {0.94, 0.20, 0.90}};
  const double* color = kPalette[(label - 1) % 8];
  for (Index c = 0; c < 3; ++c)
    frame.at(y, x, c) = 0.45 * frame.at(y, x, c) + 0.55 * color[c];
}

void mark_click(Frame& frame, const Point& point) {
  for (Index dy = -2; dy <= 2; ++dy)
    for (Index dx = -2; dx <= 2; ++dx) {
      const Index y = point.y + dy, x = point.x + dx;
      if (y < 0 || y >= frame.h || x < 0 || x >= frame.w) continue;
      const bool arm = dy == 0 || dx == 0;
      for (Index c = 0; c < 3; ++c) frame.at(y, x, c) = arm ? 1.0 : 0.0;
    }
}

int cmd_overlay(const std::string& data, const std::string& masks_root,
                const std::string& out) {
  const std::vector<fs::path> dirs = sequence_dirs(data);
  for (const auto& dir : dirs) {
    const std::string name = dir.filename().string();
    const VideoSample sample = read_sample(dir);
    const std::vector<Mask> masks = read_mask_dir(fs::path(masks_root) / name);
    if (static_cast<Index>(masks.size()) != sample.t)
      throw ShapeError(name + ": " + std::to_string(masks.size()) + " masks for " +
                       std::to_string(sample.t) + " frames");

    PointSet points;
    if (fs::exists(dir / "points.json"))
      points = load_points(dir / "points.json", sample.w, sample.h);

    const fs::path seq_out = fs::path(out) / name;
    fs::create_directories(seq_out);
    for (Index t = 0; t < sample.t; ++t) {
      Frame frame = sample.frames[t];
      for (Index y = 0; y < frame.h; ++y)
        for (Index x = 0; x < frame.w; ++x)
          if (const int label = masks[t].at(y, x); label > 0) blend_label(frame, y, x, label);
      if (t == 0)
        for (const Point& p : points.points) mark_click(frame, p);
      char file[32];
      std::snprintf(file, sizeof file, "%06lld.ppm", static_cast<long long>(t + 1));
      write_ppm(seq_out / file, frame);
    }
  }
  std::printf("rendered %zu sequences -> %s\n", dirs.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// selfheal-suite

int cmd_selfheal(const std::string& ckpt, const std::string& objmem,
                 const std::string& densemem, Index sequences, double strength,
                 std::uint64_t seed) {
  const Model model = Model::load(ckpt);
  RunFlags flags;
  flags.objmem = objmem_from_string(objmem);
  flags.densemem = parse_on_off(densemem, "--densemem");

  std::vector<std::vector<double>> per_frame_j;  // [frame][sequence*object]
  for (Index i = 0; i < sequences; ++i) {
    Rng gen(hash_mix(seed, static_cast<std::uint64_t>(i), kGenSalt));
    const VideoSample sample = gen_sequence(random_scene(gen, 64, 64, 8, 2, i % 2 == 0));
    const PointSet points = annotate_first_frame(
        sample.masks[0], hash_mix(seed, static_cast<std::uint64_t>(i), kClickSalt));

    Rng crng(hash_mix(seed, static_cast<std::uint64_t>(i), kCorruptSalt));
    const Mask corrupted = corrupt_mask(sample.masks[0], strength, crng);
    InferOptions opts;
    opts.frame1_memory_mask = &corrupted;

    const InferResult result = model.infer_video(sample, points, flags, opts);
    per_frame_j.resize(static_cast<std::size_t>(sample.t));
    for (Index t = 0; t < sample.t; ++t)
      for (int id : sample.object_ids)
        per_frame_j[static_cast<std::size_t>(t)].push_back(
            region_j(mask_region(result.masks[t], id), mask_region(sample.masks[t], id)));
  }

  std::printf("frame  median_J  mean_J   (%lld sequences, %.0f%% corrupted frame-1 memory, "
              "objmem=%s densemem=%s)\n",
              static_cast<long long>(sequences), 100.0 * strength, objmem.c_str(),
              densemem.c_str());
  for (std::size_t t = 0; t < per_frame_j.size(); ++t) {
    std::vector<double>& js = per_frame_j[t];
    std::sort(js.begin(), js.end());
    const double median = js.size() % 2 ? js[js.size() / 2]
                                        : 0.5 * (js[js.size() / 2 - 1] + js[js.size() / 2]);
    double mean = 0;
    for (double j : js) mean += j;
    mean /= static_cast<double>(js.size());
    std::printf("%5zu  %8.4f  %6.4f\n", t + 1, median, mean);
  }
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {  // FormatError, ShapeError, filesystem
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Click-seeded video object segmentation"};
  app.require_subcommand(1);
  std::function<int()> body;

  // gen-data ---------------------------------------------------------------
  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate synthetic sequences");
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--num", gen.num, "Number of sequences");
  g->add_option("--hw", gen.hw, "Frame size H,W");
  g->add_option("--frames", gen.frames, "Frames per sequence");
  g->add_option("--objects", gen.objects, "Objects per sequence");
  g->add_option("--seed", gen.seed, "Master seed");
  g->add_option("--occlude-every", gen.occlude_every,
                "Force an occlusion event in every Nth sequence (0 = never)");
  g->add_option("--jobs", gen.jobs, "Worker threads");
  g->callback([&] { body = [&] { return cmd_gen_data(gen); }; });

  // annotate ----------------------------------------------------------------
  std::string an_data;
  std::uint64_t an_seed = 0;
  auto* a = app.add_subcommand("annotate", "Write one click per object into points.json");
  a->add_option("--data", an_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  a->add_option("--seed", an_seed, "Click seed");
  a->callback([&] { body = [&] { return cmd_annotate(an_data, an_seed); }; });

  // train --------------------------------------------------------------------
  // Precedence: built-in defaults < config file < explicit flags. Flags bind
  // to locals so applying the config file cannot clobber them.
  TrainSetup setup;
  TrainSetup cli;
  std::string tr_data, tr_val, tr_out, tr_config, tr_log;
  std::string tr_modality, tr_objmem;
  Index tr_densemem = 1;
  bool tr_detach = false;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", tr_data, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--val-data", tr_val, "Held-out dataset for periodic scoring")->check(CLI::ExistingDirectory);
  t->add_option("--config", tr_config, "Flat JSON config mirroring the setup field names")
      ->check(CLI::ExistingFile);
  t->add_option("--out", tr_out, "Checkpoint path")->required();
  t->add_option("--log", tr_log, "Metrics CSV path (default: checkpoint with .csv)");
  auto* o_steps = t->add_option("--steps", cli.train.steps, "Optimizer steps");
  auto* o_batch = t->add_option("--batch", cli.train.batch, "Windows per step");
  auto* o_lr = t->add_option("--lr", cli.train.lr, "Learning rate");
  auto* o_warm = t->add_option("--warmup", cli.train.warmup, "Linear lr ramp steps");
  auto* o_lrf = t->add_option("--lr-final", cli.train.lr_final,
                              "Cosine-decay lr target (negative = constant)");
  auto* o_ttrain = t->add_option("--t-train", cli.train.t_train, "Frames per training window");
  auto* o_r = t->add_option("--r", cli.train.r, "Bootstrapped CE keep ratio");
  auto* o_seed = t->add_option("--seed", cli.train.seed, "Training seed");
  auto* o_every = t->add_option("--eval-every", cli.train.eval_every,
                                "Score --val-data every N steps (0 = never)");
  auto* o_ch = t->add_option("--channels", cli.model.channels, "Feature width C");
  auto* o_heads = t->add_option("--heads", cli.model.n_heads, "Attention heads");
  auto* o_stride = t->add_option("--stride", cli.model.stride, "Feature stride");
  auto* o_nmax = t->add_option("--n-max", cli.model.n_max, "Identity bank rows");
  auto* o_mod = t->add_option("--modality", tr_modality, "appearance_only|concat_fuse|bimodal_enhance");
  auto* o_objmem = t->add_option("--objmem", tr_objmem, "first_only|all");
  auto* o_dense = t->add_option("--densemem", tr_densemem, "1 = dense memory on, 0 = off");
  auto* o_detach = t->add_flag("--detach-memory", tr_detach, "Block gradients through stored memory");
  t->callback([&] {
    body = [&] {
      if (!tr_config.empty()) apply_config_file(tr_config, setup);
      if (o_steps->count()) setup.train.steps = cli.train.steps;
      if (o_batch->count()) setup.train.batch = cli.train.batch;
      if (o_lr->count()) setup.train.lr = cli.train.lr;
      if (o_warm->count()) setup.train.warmup = cli.train.warmup;
      if (o_lrf->count()) setup.train.lr_final = cli.train.lr_final;
      if (o_ttrain->count()) setup.train.t_train = cli.train.t_train;
      if (o_r->count()) setup.train.r = cli.train.r;
      if (o_seed->count()) setup.train.seed = cli.train.seed;
      if (o_every->count()) setup.train.eval_every = cli.train.eval_every;
      if (o_ch->count()) setup.model.channels = cli.model.channels;
      if (o_heads->count()) setup.model.n_heads = cli.model.n_heads;
      if (o_stride->count()) setup.model.stride = cli.model.stride;
      if (o_nmax->count()) setup.model.n_max = cli.model.n_max;
      if (o_mod->count()) setup.model.modality = modality_from_string(tr_modality);
      if (o_objmem->count()) setup.flags.objmem = objmem_from_string(tr_objmem);
      if (o_dense->count()) setup.flags.densemem = tr_densemem != 0;
      if (o_detach->count()) setup.train.detach_memory = tr_detach;
      return cmd_train(setup, tr_data, tr_val, tr_out, tr_log);
    };
  });

  // infer ---------------------------------------------------------------------
  InferArgs inf;
  auto* n = app.add_subcommand("infer", "Segment sequences with a trained model");
  n->add_option("--ckpt", inf.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  n->add_option("--data", inf.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  n->add_option("--out", inf.out, "Predicted-mask output directory")->required();
  n->add_option("--points", inf.points, "auto (from ground truth + seed) or file (points.json)");
  n->add_option("--seed", inf.seed, "Click seed for --points auto");
  n->add_option("--objmem", inf.objmem, "first_only|all");
  n->add_option("--densemem", inf.densemem, "on|off");
  n->add_option("--modality", inf.modality, "Assert the checkpoint's modality");
  n->add_option("--jobs", inf.jobs, "Worker threads");
  n->callback([&] { body = [&] { return cmd_infer(inf); }; });

  // baseline --------------------------------------------------------------------
  std::string bl_data, bl_points = "auto", bl_out;
  std::uint64_t bl_seed = 0;
  double bl_tau = kBaselineTau;
  int bl_jobs = 1;
  auto* b = app.add_subcommand("baseline", "Flow-advected click + region growing");
  b->add_option("--data", bl_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  b->add_option("--out", bl_out, "Predicted-mask output directory")->required();
  b->add_option("--points", bl_points, "auto or file");
  b->add_option("--seed", bl_seed, "Click seed for --points auto");
  b->add_option("--tau", bl_tau, "Color distance threshold");
  b->add_option("--jobs", bl_jobs, "Worker threads");
  b->callback([&] {
    body = [&] { return cmd_baseline(bl_data, bl_points, bl_seed, bl_tau, bl_out, bl_jobs); };
  });

  // eval ---------------------------------------------------------------------
  std::string ev_pred, ev_gt, ev_out;
  bool ev_first_only = false, ev_exclude_first = false;
  int ev_tolerance = 0;
  auto* e = app.add_subcommand("eval", "Score predictions against ground truth");
  e->add_option("--pred", ev_pred, "Predicted-mask directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--gt", ev_gt, "Ground-truth dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--out", ev_out, "Report CSV path");
  auto* flag_first = e->add_flag("--first-frame-only", ev_first_only, "Score only frame 1");
  auto* flag_excl = e->add_flag("--exclude-first", ev_exclude_first, "Skip frame 1");
  flag_first->excludes(flag_excl);
  e->add_option("--tolerance", ev_tolerance, "Boundary tolerance in px (0 = from image size)");
  e->callback([&] {
    body = [&] {
      return cmd_eval(ev_pred, ev_gt, ev_first_only, ev_exclude_first, ev_tolerance, ev_out);
    };
  });

  // overlay --------------------------------------------------------------------
  std::string ov_data, ov_masks, ov_out;
  auto* o = app.add_subcommand("overlay", "Render frames with colored masks and clicks");
  o->add_option("--data", ov_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  o->add_option("--masks", ov_masks, "Mask directory (predictions or dataset)")->required()->check(CLI::ExistingDirectory);
  o->add_option("--out", ov_out, "Rendered PPM output directory")->required();
  o->callback([&] { body = [&] { return cmd_overlay(ov_data, ov_masks, ov_out); }; });

  // selfheal-suite ----------------------------------------------------------------
  std::string sh_ckpt, sh_objmem = "all", sh_densemem = "on";
  Index sh_sequences = 10;
  double sh_strength = 0.30;
  std::uint64_t sh_seed = 7117;
  auto* s = app.add_subcommand("selfheal-suite",
                               "Measure recovery from a corrupted first-frame memory");
  s->add_option("--ckpt", sh_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  s->add_option("--objmem", sh_objmem, "first_only|all");
  s->add_option("--densemem", sh_densemem, "on|off");
  s->add_option("--sequences", sh_sequences, "Suite size");
  s->add_option("--strength", sh_strength, "Corruption strength (area fraction)");
  s->add_option("--seed", sh_seed, "Suite seed");
  s->callback([&] {
    body = [&] {
      return cmd_selfheal(sh_ckpt, sh_objmem, sh_densemem, sh_sequences, sh_strength, sh_seed);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }
  return guarded(body);
}

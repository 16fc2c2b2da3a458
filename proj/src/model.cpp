#include "clickseg/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "clickseg/synthetic.hpp"

namespace clickseg {

namespace {

bool power_of_two(Index v) { return v >= 1 && (v & (v - 1)) == 0; }

Index cells_of(const FeatureMap& ft) { return ft.f.shape()[0] * ft.f.shape()[1]; }

Tensor flatten_map(const Tensor& spatial) {
  const Shape& s = spatial.shape();
  return reshape(spatial, {s[0] * s[1], s[2]});
}

Tensor unflatten_map(const Tensor& flat, Index h, Index w) {
  return reshape(flat, {h, w, flat.shape()[1]});
}

std::vector<Index> sorted_point_ids(const PointSet& points) {
  std::vector<Index> ids;
  for (const auto& p : points.points) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw ShapeError("duplicate object id in point set");
  if (ids.empty() || ids.front() != 0)
    throw ShapeError("point set must include the background point (id 0)");
  return ids;
}

}  // namespace

Modality modality_from_string(const std::string& s) {
  if (s == "appearance_only") return Modality::kAppearanceOnly;
  if (s == "concat_fuse") return Modality::kConcatFuse;
  if (s == "bimodal_enhance") return Modality::kBimodalEnhance;
  throw ConfigError("unknown modality '" + s +
                    "' (expected appearance_only, concat_fuse, or bimodal_enhance)");
}

ObjMemMode objmem_from_string(const std::string& s) {
  if (s == "first_only") return ObjMemMode::kFirstOnly;
  if (s == "all") return ObjMemMode::kAll;
  throw ConfigError("unknown object-memory mode '" + s + "' (expected first_only or all)");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kAppearanceOnly: return "appearance_only";
    case Modality::kConcatFuse: return "concat_fuse";
    case Modality::kBimodalEnhance: return "bimodal_enhance";
  }
  return "?";
}

std::string to_string(ObjMemMode m) {
  return m == ObjMemMode::kFirstOnly ? "first_only" : "all";
}

void ModelConfig::validate() const {
  if (channels < 2 || channels % n_heads != 0)
    throw ConfigError("channels (" + std::to_string(channels) +
                      ") must be positive and divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  if (n_heads < 1) throw ConfigError("n_heads must be at least 1");
  if (!power_of_two(stride) || stride < 2)
    throw ConfigError("stride must be a power of two >= 2, got " + std::to_string(stride));
  if (n_max < 2 || n_max > 255)
    throw ConfigError("n_max must lie in [2, 255], got " + std::to_string(n_max));
  if (flow_vmax <= 0.0) throw ConfigError("flow_vmax must be positive");
}

std::vector<Index> cell_majority_labels(const Mask& mask, Index stride) {
  if (stride < 1 || mask.h % stride != 0 || mask.w % stride != 0)
    throw ShapeError("mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                     " not divisible by stride " + std::to_string(stride));
  const Index ch = mask.h / stride, cw = mask.w / stride;
  std::vector<Index> labels(static_cast<std::size_t>(ch * cw), 0);
  std::vector<Index> counts(256, 0);
  for (Index cy = 0; cy < ch; ++cy)
    for (Index cx = 0; cx < cw; ++cx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (Index dy = 0; dy < stride; ++dy)
        for (Index dx = 0; dx < stride; ++dx)
          ++counts[mask.at(cy * stride + dy, cx * stride + dx)];
      Index best = 0;
      for (Index label = 1; label < 256; ++label)
        if (counts[label] > counts[best]) best = label;  // ties keep the lower
      labels[cy * cw + cx] = best;
    }
  return labels;
}

Tensor frame_to_tensor(const Frame& frame) {
  return Tensor::from_data({frame.h, frame.w, 3}, frame.data);
}

Tensor flow_image_tensor(const Flow& flow, double vmax) {
  return frame_to_tensor(encode_flow(flow, vmax));
}

Tensor Model::add_param(const std::string& name, const Shape& shape, double std_dev,
                        Rng& rng) {
  std::vector<double> data(static_cast<std::size_t>(numel(shape)), 0.0);
  if (std_dev > 0.0)
    for (auto& v : data) v = std_dev * rng.normal();
  Tensor t = Tensor::from_data(shape, std::move(data), /*requires_grad=*/true);
  params_.emplace_back(name, t);
  return t;
}

Tensor Model::param(const std::string& name) const {
  for (const auto& [key, tensor] : params_)
    if (key == name) return tensor;
  throw ShapeError("unknown parameter '" + name + "'");
}

Model::Model(ModelConfig config, Rng& rng) : config_(config) {
  config_.validate();
  const Index c = config_.channels;
  const Index half = c / 2;
  const int k = std::countr_zero(static_cast<std::uint64_t>(config_.stride));

  auto conv_init = [](Index kh, Index kw, Index cin) {
    return std::sqrt(2.0 / static_cast<double>(kh * kw * cin));
  };
  auto fc_init = [](Index cin) { return std::sqrt(2.0 / static_cast<double>(cin)); };
  const double attn_init = std::sqrt(1.0 / static_cast<double>(c));

  auto add_conv = [&](const std::string& name, Index cin, Index cout) {
    add_param(name + ".w", {3, 3, cin, cout}, conv_init(3, 3, cin), rng);
    add_param(name + ".b", {cout}, 0.0, rng);
  };
  auto add_stage = [&](const std::string& prefix, Index cin, Index cout, int downs) {
    const int convs = std::max(1, downs);
    for (int d = 0; d < convs; ++d)
      add_conv(prefix + ".down" + std::to_string(d), d == 0 ? cin : cout, cout);
    add_conv(prefix + ".res1", cout, cout);
    add_conv(prefix + ".res2", cout, cout);
  };
  auto add_attention = [&](const std::string& prefix, Index width) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"})
      add_param(prefix + w, {width, width}, attn_init, rng);
  };
  auto add_ln = [&](const std::string& prefix, Index width) {
    Tensor g = add_param(prefix + ".g", {width}, 0.0, rng);
    g.mutable_array().setConstant(1.0);
    add_param(prefix + ".b", {width}, 0.0, rng);
  };
  auto add_enhance = [&](const std::string& prefix, Index width, bool with_flow) {
    add_ln(prefix + ".img.ln1", width);
    add_attention(prefix + ".img.self", width);
    if (!with_flow) return;
    add_ln(prefix + ".flow.ln1", width);
    add_attention(prefix + ".flow.self", width);
    add_ln(prefix + ".img.ln2", width);
    add_ln(prefix + ".flow.ln2", width);
    add_attention(prefix + ".img.cross", width);
    add_attention(prefix + ".flow.cross", width);
  };

  const bool has_flow = config_.modality != Modality::kAppearanceOnly;
  const bool enhance = config_.modality != Modality::kConcatFuse;

  add_stage("encoder.img.stage1", 3, half, k - 1);
  add_stage("encoder.img.stage2", half, c, 1);
  if (has_flow) {
    add_stage("encoder.flow.stage1", 3, half, k - 1);
    add_stage("encoder.flow.stage2", half, c, 1);
  }
  if (enhance) {
    add_enhance("encoder.enhance1", half, has_flow);
    add_enhance("encoder.enhance2", c, has_flow);
  }
  if (config_.modality == Modality::kBimodalEnhance) {
    const Index hidden = std::max<Index>(4, c / 2);
    add_param("encoder.fuse.fc1.w", {2 * c, hidden}, fc_init(2 * c), rng);
    add_param("encoder.fuse.fc1.b", {hidden}, 0.0, rng);
    add_param("encoder.fuse.fc2.w", {hidden, 2 * c}, fc_init(hidden), rng);
    add_param("encoder.fuse.fc2.b", {2 * c}, 0.0, rng);
    add_param("encoder.fuse.proj.w", {2 * c, c}, fc_init(2 * c), rng);
    add_param("encoder.fuse.proj.b", {c}, 0.0, rng);
  } else if (config_.modality == Modality::kConcatFuse) {
    add_param("encoder.fuse.proj.w", {2 * c, c}, fc_init(2 * c), rng);
    add_param("encoder.fuse.proj.b", {c}, 0.0, rng);
  }

  add_param("bank.id", {config_.n_max, c}, 0.02, rng);

  add_ln("segattn.ln1", c);
  add_attention("segattn.self", c);
  add_ln("segattn.ln2", c);
  add_attention("segattn.cross", c);

  Index cur = 2 * c;
  for (int block = 0; block < k; ++block) {
    const Index out = std::max<Index>(8, c >> block);
    const std::string prefix = "decoder.block" + std::to_string(block);
    add_param(prefix + ".proj.w", {cur, out}, fc_init(cur), rng);
    add_param(prefix + ".proj.b", {out}, 0.0, rng);
    add_conv(prefix + ".conv1", cur, out);
    add_conv(prefix + ".conv2", out, out);
    cur = out;
  }
  // near-zero head: fresh models start close to the uniform predictor while
  // still passing gradient to everything upstream
  add_param("decoder.head.w", {cur, config_.n_max}, 0.01, rng);
  add_param("decoder.head.b", {config_.n_max}, 0.0, rng);
}

AttentionParams Model::attention(const std::string& prefix) const {
  AttentionParams p;
  p.w_q = param(prefix + ".wq");
  p.w_k = param(prefix + ".wk");
  p.w_v = param(prefix + ".wv");
  p.w_o = param(prefix + ".wo");
  p.channels = static_cast<int>(p.w_q.shape()[0]);
  int heads = static_cast<int>(config_.n_heads);
  while (heads > 1 && p.channels % heads != 0) --heads;
  p.n_heads = heads;
  return p;
}

Tensor Model::ln_affine(const Tensor& x, const std::string& prefix) const {
  return layer_norm(x) * param(prefix + ".g") + param(prefix + ".b");
}

Tensor Model::conv_stage(const Tensor& x, const std::string& prefix, int downs) const {
  const int convs = std::max(1, downs);
  Tensor cur = x;
  for (int d = 0; d < convs; ++d) {
    const std::string name = prefix + ".down" + std::to_string(d);
    cur = relu(conv2d(cur, param(name + ".w"), downs == 0 ? 1 : 2, 1) + param(name + ".b"));
  }
  Tensor h = relu(conv2d(cur, param(prefix + ".res1.w"), 1, 1) + param(prefix + ".res1.b"));
  h = conv2d(h, param(prefix + ".res2.w"), 1, 1) + param(prefix + ".res2.b");
  return relu(cur + h);
}

void Model::enhance_pair(Tensor& a, Tensor& b, const std::string& prefix,
                         Tensor* a_self, Tensor* b_self) const {
  Tensor an = ln_affine(a, prefix + ".img.ln1");
  Tensor a1 = multi_head_attention(an, an, an, attention(prefix + ".img.self"));
  if (a_self) *a_self = a1;
  if (!b.defined()) {  // appearance-only: self-attention enhances one branch
    a = a1;
    return;
  }
  Tensor bn = ln_affine(b, prefix + ".flow.ln1");
  Tensor b1 = multi_head_attention(bn, bn, bn, attention(prefix + ".flow.self"));
  if (b_self) *b_self = b1;
  Tensor a1n = ln_affine(a1, prefix + ".img.ln2");
  Tensor b1n = ln_affine(b1, prefix + ".flow.ln2");
  a = a1 + multi_head_attention(a1n, b1n, b1n, attention(prefix + ".img.cross"));
  b = b1 + multi_head_attention(b1n, a1n, a1n, attention(prefix + ".flow.cross"));
}

Tensor Model::fuse_channels(const Tensor& cat_map) const {
  const Shape& s = cat_map.shape();
  Tensor flat = flatten_map(cat_map);
  Tensor pooled = reshape(mean(flat, 0), {1, s[2]});
  Tensor gate = relu(matmul(pooled, param("encoder.fuse.fc1.w")) + param("encoder.fuse.fc1.b"));
  gate = sigmoid(matmul(gate, param("encoder.fuse.fc2.w")) + param("encoder.fuse.fc2.b"));
  Tensor fused = matmul(flat * gate, param("encoder.fuse.proj.w")) + param("encoder.fuse.proj.b");
  return unflatten_map(fused, s[0], s[1]);
}

FeatureMap Model::encode_bimodal(const Tensor& image, const Tensor& flow_img) const {
  if (image.rank() != 3 || image.shape()[2] != 3)
    throw ConfigError("encoder expects an (H, W, 3) image, got " + shape_str(image.shape()));
  const Index h = image.shape()[0], w = image.shape()[1];
  if (h % config_.stride != 0 || w % config_.stride != 0)
    throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by stride " + std::to_string(config_.stride));
  const bool has_flow = config_.modality != Modality::kAppearanceOnly;
  if (has_flow && (flow_img.rank() != 3 || flow_img.shape() != image.shape()))
    throw ConfigError("flow image must match the frame shape");

  const int k = std::countr_zero(static_cast<std::uint64_t>(config_.stride));
  FeatureMap out;

  Tensor fi = conv_stage(image, "encoder.img.stage1", k - 1);
  Tensor fo;
  if (has_flow) fo = conv_stage(flow_img, "encoder.flow.stage1", k - 1);
  const Index h1 = fi.shape()[0], w1 = fi.shape()[1];

  switch (config_.modality) {
    case Modality::kConcatFuse: {
      fi = conv_stage(fi, "encoder.img.stage2", 1);
      fo = conv_stage(fo, "encoder.flow.stage2", 1);
      Tensor both[] = {fi, fo};
      Tensor cat = flatten_map(concat(both, 2));
      Tensor fused = matmul(cat, param("encoder.fuse.proj.w")) + param("encoder.fuse.proj.b");
      out.f = unflatten_map(fused, fi.shape()[0], fi.shape()[1]);
      return out;
    }
    case Modality::kAppearanceOnly: {
      Tensor a = flatten_map(fi), none;
      enhance_pair(a, none, "encoder.enhance1", &out.img_self1, nullptr);
      out.img_cross1 = unflatten_map(a, h1, w1);
      Tensor a2 = conv_stage(out.img_cross1, "encoder.img.stage2", 1);
      const Index h2 = a2.shape()[0], w2 = a2.shape()[1];
      Tensor a2f = flatten_map(a2);
      enhance_pair(a2f, none, "encoder.enhance2", &out.img_self2, nullptr);
      out.img_cross2 = unflatten_map(a2f, h2, w2);
      out.f = out.img_cross2;
      return out;
    }
    case Modality::kBimodalEnhance: {
      Tensor a = flatten_map(fi), b = flatten_map(fo);
      enhance_pair(a, b, "encoder.enhance1", &out.img_self1, &out.flow_self1);
      out.img_cross1 = unflatten_map(a, h1, w1);
      out.flow_cross1 = unflatten_map(b, h1, w1);
      Tensor a2 = conv_stage(out.img_cross1, "encoder.img.stage2", 1);
      Tensor b2 = conv_stage(out.flow_cross1, "encoder.flow.stage2", 1);
      const Index h2 = a2.shape()[0], w2 = a2.shape()[1];
      Tensor a2f = flatten_map(a2), b2f = flatten_map(b2);
      enhance_pair(a2f, b2f, "encoder.enhance2", &out.img_self2, &out.flow_self2);
      out.img_cross2 = unflatten_map(a2f, h2, w2);
      out.flow_cross2 = unflatten_map(b2f, h2, w2);
      Tensor both[] = {out.img_cross2, out.flow_cross2};
      out.f = fuse_channels(concat(both, 2));
      return out;
    }
  }
  throw ConfigError("unreachable modality");
}

TokenSet Model::point_tokenize(const FeatureMap& f1, const PointSet& points,
                               std::vector<std::string>* warnings) const {
  const Index hs = f1.f.shape()[0], ws = f1.f.shape()[1];
  const Index h = hs * config_.stride, w = ws * config_.stride;
  const std::vector<Index> ids = sorted_point_ids(points);

  std::vector<Index> rows;
  std::vector<Index> cells(static_cast<std::size_t>(hs * ws), -1);
  for (Index id : ids) {
    const Point* p = points.find(static_cast<int>(id));
    if (p->id >= config_.n_max)
      throw ShapeError("object id " + std::to_string(p->id) + " exceeds the model's " +
                       std::to_string(config_.n_max - 1) + "-object capacity");
    if (p->x < 0 || p->x >= w || p->y < 0 || p->y >= h)
      throw ShapeError("point for id " + std::to_string(p->id) + " out of bounds");
    const Index cell = (p->y / config_.stride) * ws + (p->x / config_.stride);
    if (cells[cell] >= 0 && warnings)
      warnings->push_back("points for ids " + std::to_string(cells[cell]) + " and " +
                          std::to_string(p->id) + " share feature cell " +
                          std::to_string(cell));
    cells[cell] = p->id;
    rows.push_back(cell);
  }

  TokenSet tokens;
  tokens.ids = ids;
  tokens.absent.assign(ids.size(), false);
  tokens.z = gather_rows(flatten_map(f1.f), rows);
  tokens.z_id = tokens.z + gather_rows(param("bank.id"), ids);
  return tokens;
}

Tensor Model::segment_attention(const FeatureMap& ft, const Tensor& keys,
                                const Tensor& values) const {
  if (!keys.defined() || !values.defined())
    throw ShapeError("segment attention requires a non-empty memory");
  const Index hs = ft.f.shape()[0], ws = ft.f.shape()[1];
  Tensor flat = flatten_map(ft.f);
  Tensor n1 = ln_affine(flat, "segattn.ln1");
  Tensor x = flat + multi_head_attention(n1, n1, n1, attention("segattn.self"));
  Tensor n2 = ln_affine(x, "segattn.ln2");
  Tensor e = x + multi_head_attention(n2, keys, values, attention("segattn.cross"));
  return unflatten_map(e, hs, ws);
}

DecodeResult Model::decode_mask(const Tensor& e, const FeatureMap& ft) const {
  if (e.shape() != ft.f.shape())
    throw ShapeError("decoder inputs disagree: " + shape_str(e.shape()) + " vs " +
                     shape_str(ft.f.shape()));
  const int k = std::countr_zero(static_cast<std::uint64_t>(config_.stride));
  Tensor both[] = {e, ft.f};
  Tensor cur = concat(both, 2);
  for (int block = 0; block < k; ++block) {
    const std::string prefix = "decoder.block" + std::to_string(block);
    Tensor up = upsample2x(cur);
    const Index uh = up.shape()[0], uw = up.shape()[1];
    Tensor skip = matmul(flatten_map(up), param(prefix + ".proj.w")) + param(prefix + ".proj.b");
    Tensor head = relu(conv2d(up, param(prefix + ".conv1.w"), 1, 1) + param(prefix + ".conv1.b"));
    head = conv2d(head, param(prefix + ".conv2.w"), 1, 1) + param(prefix + ".conv2.b");
    cur = relu(unflatten_map(skip, uh, uw) + head);
  }
  Tensor logits_flat = matmul(flatten_map(cur), param("decoder.head.w")) + param("decoder.head.b");
  const Index h = cur.shape()[0], w = cur.shape()[1];

  DecodeResult out;
  out.logits = reshape(logits_flat, {h, w, config_.n_max});
  out.mask = Mask(h, w);
  const auto& v = out.logits.array();
  for (Index p = 0; p < h * w; ++p) {
    Index best = 0;
    for (Index ch = 1; ch < config_.n_max; ++ch)
      if (v[p * config_.n_max + ch] > v[p * config_.n_max + best]) best = ch;
    out.mask.data[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

TokenSet Model::mask_pool(const FeatureMap& ft, const Mask& mask,
                          std::span<const Index> ids) const {
  if (ids.empty()) throw ShapeError("mask_pool needs at least one id");
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= config_.n_max)
      throw ShapeError("mask_pool id out of range: " + std::to_string(ids[r]));
    if (r > 0 && ids[r] <= ids[r - 1]) throw ShapeError("mask_pool ids must ascend");
  }
  const Index cells = cells_of(ft);
  if (mask.h != ft.f.shape()[0] * config_.stride || mask.w != ft.f.shape()[1] * config_.stride)
    throw ShapeError("mask does not match the feature map's source resolution");

  const std::vector<Index> labels = cell_majority_labels(mask, config_.stride);
  const Index n = static_cast<Index>(ids.size());

  std::vector<Index> count(static_cast<std::size_t>(n), 0);
  std::vector<Index> row_of(256, -1);
  for (Index r = 0; r < n; ++r) row_of[ids[r]] = r;
  for (Index cell = 0; cell < cells; ++cell) {
    const Index r = row_of[labels[cell]];
    if (r >= 0) ++count[r];
  }

  std::vector<double> weights(static_cast<std::size_t>(n * cells), 0.0);
  for (Index cell = 0; cell < cells; ++cell) {
    const Index r = row_of[labels[cell]];
    if (r >= 0) weights[r * cells + cell] = 1.0 / static_cast<double>(count[r]);
  }

  TokenSet tokens;
  tokens.ids.assign(ids.begin(), ids.end());
  tokens.absent.resize(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) tokens.absent[static_cast<std::size_t>(r)] = count[r] == 0;
  Tensor pool = Tensor::from_data({n, cells}, std::move(weights));
  tokens.z = matmul(pool, flatten_map(ft.f));
  tokens.z_id = tokens.z + gather_rows(param("bank.id"), tokens.ids);
  return tokens;
}

DenseTokens Model::make_dense_tokens(const FeatureMap& ft, const Mask& mask) const {
  if (mask.h != ft.f.shape()[0] * config_.stride || mask.w != ft.f.shape()[1] * config_.stride)
    throw ShapeError("mask does not match the feature map's source resolution");
  DenseTokens dense;
  dense.z = flatten_map(ft.f);
  dense.z_id = dense.z + gather_rows(param("bank.id"),
                                     cell_majority_labels(mask, config_.stride));
  return dense;
}

void Model::memory_update(MemoryState& mem, const TokenSet& pooled,
                          const DenseTokens& dense, const RunFlags& flags,
                          bool first_frame) const {
  if (flags.objmem == ObjMemMode::kAll) {
    // frame 1's pooled tokens replace the seeded point tokens, keeping one
    // entry per processed frame
    if (first_frame) mem.object.clear();
    mem.object.push_back(pooled);
  }
  if (flags.densemem) {
    if (first_frame) mem.dense_first = dense;
    mem.dense_prev = dense;
  }
}

Index MemoryState::key_rows() const {
  Index rows = 0;
  for (const auto& ts : object) rows += ts.z.shape()[0];
  if (dense_first) rows += dense_first->z.shape()[0];
  if (dense_prev) rows += dense_prev->z.shape()[0];
  return rows;
}

Tensor MemoryState::keys() const {
  std::vector<Tensor> parts;
  for (const auto& ts : object) parts.push_back(ts.z);
  if (dense_first) parts.push_back(dense_first->z);
  if (dense_prev) parts.push_back(dense_prev->z);
  if (parts.empty()) throw ShapeError("memory is empty: no keys to attend over");
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor MemoryState::values() const {
  std::vector<Tensor> parts;
  for (const auto& ts : object) parts.push_back(ts.z_id);
  if (dense_first) parts.push_back(dense_first->z_id);
  if (dense_prev) parts.push_back(dense_prev->z_id);
  if (parts.empty()) throw ShapeError("memory is empty: no values to attend over");
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

InferResult Model::infer_video(const VideoSample& sample, const PointSet& points,
                               const RunFlags& flags, const InferOptions& opts) const {
  if (sample.t < 1 || sample.frames.size() != static_cast<std::size_t>(sample.t) ||
      sample.flows.size() != static_cast<std::size_t>(sample.t))
    throw ShapeError("sample must provide one frame and one flow field per time step");

  const std::vector<Index> ids = sorted_point_ids(points);
  InferResult res;
  MemoryState mem;

  for (Index t = 0; t < sample.t; ++t) {
    Tensor img = frame_to_tensor(sample.frames[t]);
    Tensor flo = flow_image_tensor(sample.flows[t], config_.flow_vmax);
    FeatureMap ft = encode_bimodal(img, flo);

    if (t == 0) mem.object = {point_tokenize(ft, points, &res.warnings)};
    Tensor e = segment_attention(ft, mem.keys(), mem.values());
    DecodeResult dec = decode_mask(e, ft);

    const Mask* pool_from = &dec.mask;
    if (t == 0 && opts.frame1_memory_mask) {
      if (opts.frame1_memory_mask->h != dec.mask.h ||
          opts.frame1_memory_mask->w != dec.mask.w)
        throw ShapeError("frame-1 memory mask has the wrong shape");
      pool_from = opts.frame1_memory_mask;
    }
    TokenSet pooled = mask_pool(ft, *pool_from, ids);
    DenseTokens dense = make_dense_tokens(ft, *pool_from);
    memory_update(mem, pooled, dense, flags, t == 0);

    res.masks.push_back(std::move(dec.mask));
    res.logits.push_back(dec.logits);
    res.memory_rows.push_back(mem.key_rows());
  }
  return res;
}

namespace {

constexpr char kMetaName[] = "meta.config";

ModelConfig config_from_meta(const Tensor& meta) {
  if (meta.rank() != 1 || meta.shape()[0] != 6)
    throw ConfigError("malformed meta.config record in weights file");
  const auto& v = meta.array();
  ModelConfig config;
  config.channels = static_cast<Index>(v[0]);
  config.n_heads = static_cast<Index>(v[1]);
  config.stride = static_cast<Index>(v[2]);
  config.n_max = static_cast<Index>(v[3]);
  config.flow_vmax = v[4];
  const int code = static_cast<int>(v[5]);
  if (code < 0 || code > 2)
    throw ConfigError("unknown modality code in weights file");
  config.modality = static_cast<Modality>(code);
  return config;
}

Tensor meta_of(const ModelConfig& config) {
  return Tensor::from_data(
      {6}, {static_cast<double>(config.channels), static_cast<double>(config.n_heads),
            static_cast<double>(config.stride), static_cast<double>(config.n_max),
            config.flow_vmax, static_cast<double>(static_cast<int>(config.modality))});
}

}  // namespace

void Model::save_weights(const std::filesystem::path& path) const {
  NamedTensors entries;
  entries.reserve(params_.size() + 1);
  entries.emplace_back(kMetaName, meta_of(config_));
  entries.insert(entries.end(), params_.begin(), params_.end());
  save_checkpoint(path, entries);
}

void Model::load_weights(const std::filesystem::path& path) {
  NamedTensors loaded = load_checkpoint(path);
  const auto meta = std::find_if(loaded.begin(), loaded.end(),
                                 [](const auto& e) { return e.first == kMetaName; });
  if (meta != loaded.end()) {
    const ModelConfig stored = config_from_meta(meta->second);
    if (stored.channels != config_.channels || stored.n_heads != config_.n_heads ||
        stored.stride != config_.stride || stored.n_max != config_.n_max ||
        stored.flow_vmax != config_.flow_vmax || stored.modality != config_.modality)
      throw ConfigError("weights file describes a different architecture (" +
                        std::to_string(stored.channels) + "ch, stride " +
                        std::to_string(stored.stride) + ", " + to_string(stored.modality) +
                        ")");
    loaded.erase(meta);
  }
  if (loaded.size() != params_.size())
    throw ConfigError("weights file holds " + std::to_string(loaded.size()) +
                      " tensors, model has " + std::to_string(params_.size()));
  for (auto& [name, tensor] : params_) {
    const auto it = std::find_if(loaded.begin(), loaded.end(),
                                 [&](const auto& e) { return e.first == name; });
    if (it == loaded.end())
      throw ConfigError("weights file is missing parameter '" + name + "'");
    if (it->second.shape() != tensor.shape())
      throw ConfigError("parameter '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " +
                        shape_str(tensor.shape()));
    tensor.mutable_array() = it->second.array();
  }
}

Model Model::load(const std::filesystem::path& path) {
  NamedTensors loaded = load_checkpoint(path);
  const auto meta = std::find_if(loaded.begin(), loaded.end(),
                                 [](const auto& e) { return e.first == kMetaName; });
  if (meta == loaded.end())
    throw ConfigError("weights file carries no architecture description; it was not "
                      "written by save_weights");
  Rng rng(0);
  Model model(config_from_meta(meta->second), rng);
  model.load_weights(path);
  return model;
}

}  // namespace clickseg

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clickseg/annotate.hpp"
#include "clickseg/checkpoint.hpp"
#include "clickseg/ops.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

/// How image and flow features are combined by the encoder.
///  - kAppearanceOnly: image branch only; attention blocks stay, flow is unused.
///  - kConcatFuse: both conv trunks, fused by one per-position linear layer;
///    no attention inside the encoder.
///  - kBimodalEnhance: full two-stage pipeline with per-modality self
///    attention, cross-modal attention, and channel-gated fusion.
enum class Modality { kAppearanceOnly, kConcatFuse, kBimodalEnhance };

/// Object-memory growth policy: keep only the frame-1 tokens, or append the
/// pooled tokens of every processed frame.
enum class ObjMemMode { kFirstOnly, kAll };

Modality modality_from_string(const std::string& s);
ObjMemMode objmem_from_string(const std::string& s);
std::string to_string(Modality m);
std::string to_string(ObjMemMode m);

struct RunFlags {
  ObjMemMode objmem = ObjMemMode::kAll;
  bool densemem = true;
};

struct ModelConfig {
  Index channels = 32;  // C; divisible by n_heads
  Index n_heads = 4;
  Index stride = 4;     // feature downsampling s; power of two, >= 2
  Index n_max = 4;      // logit channels: background + up to n_max-1 objects
  double flow_vmax = 4.0;  // range used to encode flow fields as images
  Modality modality = Modality::kBimodalEnhance;

  void validate() const;  // ConfigError on violation
};

/// Stride-s feature map plus the encoder's per-stage intermediates (kept so
/// tests can probe the two-branch structure; null tensors in modes that skip
/// a branch or block).
struct FeatureMap {
  Tensor f;  // (H/s, W/s, C)
  Tensor img_self1, flow_self1;    // stage-1 self-attention outputs (C/2)
  Tensor img_cross1, flow_cross1;  // stage-1 cross-enhanced features (C/2)
  Tensor img_self2, flow_self2;    // stage-2 self-attention outputs (C)
  Tensor img_cross2, flow_cross2;  // stage-2 cross-enhanced features (C)
};

/// Per-object token rows: z holds pooled/sampled features, z_id adds the
/// identity row of each object. Row order follows `ids` (ascending, with
/// background id 0 first). `absent[r]` marks rows whose object had no pixels;
/// such rows carry a zero feature token.
struct TokenSet {
  Tensor z;      // (n_rows, C)
  Tensor z_id;   // (n_rows, C)
  std::vector<Index> ids;
  std::vector<bool> absent;
};

/// One row per feature cell: z = flattened features, z_id adds the identity
/// row of the cell's mask label.
struct DenseTokens {
  Tensor z;     // (H/s * W/s, C)
  Tensor z_id;
};

/// Growing memory: per-frame object token sets plus at most two dense slots
/// (frame 1, frozen after the first write; previous frame, overwritten).
struct MemoryState {
  std::vector<TokenSet> object;
  std::optional<DenseTokens> dense_first;
  std::optional<DenseTokens> dense_prev;

  Index key_rows() const;
  Tensor keys() const;    // all feature tokens stacked; ShapeError when empty
  Tensor values() const;  // all ID-ed tokens, congruent with keys()
};

struct DecodeResult {
  Tensor logits;  // (H, W, n_max)
  Mask mask;      // per-pixel argmax, ties toward the lower label
};

struct InferOptions {
  /// When set, frame 1's memory tokens are pooled from this mask instead of
  /// the predicted one (the predicted mask is still returned). Lets the
  /// degraded-start recovery experiment plant a corrupted initial memory.
  const Mask* frame1_memory_mask = nullptr;
};

struct InferResult {
  std::vector<Mask> masks;        // one per frame
  std::vector<Tensor> logits;     // (H, W, n_max) per frame
  std::vector<Index> memory_rows; // key rows after each frame's update
  std::vector<std::string> warnings;
};

/// Majority label of each stride x stride cell, ties to the lowest label.
/// Returns (H/stride * W/stride) labels in row-major cell order.
std::vector<Index> cell_majority_labels(const Mask& mask, Index stride);

Tensor frame_to_tensor(const Frame& frame);              // (H, W, 3)
Tensor flow_image_tensor(const Flow& flow, double vmax); // encoded, (H, W, 3)

class Model {
 public:
  Model(ModelConfig config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  NamedTensors& params() { return params_; }
  const NamedTensors& params() const { return params_; }
  Tensor param(const std::string& name) const;  // ShapeError if unknown

  /// Writes all parameters plus a `meta.config` record describing the
  /// architecture, so the file alone can rebuild the model.
  void save_weights(const std::filesystem::path& path) const;
  /// Loads a checkpoint written by save_weights; every parameter must be
  /// present with a matching shape (FormatError/ConfigError otherwise), and
  /// an embedded `meta.config` must agree with this model's configuration.
  void load_weights(const std::filesystem::path& path);
  /// Reconstructs a model from a weights file via its `meta.config` record.
  static Model load(const std::filesystem::path& path);

  /// Two conv stages interleaved with modality-enhance attention blocks,
  /// fused into one (H/s, W/s, C) map. image/flow_img: (H, W, 3).
  FeatureMap encode_bimodal(const Tensor& image, const Tensor& flow_img) const;

  /// Feature token of each point's cell (floor(y/s), floor(x/s)) plus its
  /// identity row. Points sharing a cell produce a warning, not an error.
  TokenSet point_tokenize(const FeatureMap& f1, const PointSet& points,
                          std::vector<std::string>* warnings = nullptr) const;

  /// X = F + MHA(LN(F)); E = X + MHA(LN(X), keys, values); returns E with
  /// shape (H/s, W/s, C).
  Tensor segment_attention(const FeatureMap& ft, const Tensor& keys,
                           const Tensor& values) const;

  /// Concat [E, F] -> log2(s) residual x2-upsample blocks -> 1x1 head.
  DecodeResult decode_mask(const Tensor& e, const FeatureMap& ft) const;

  /// Masked average of feature cells per id (majority-downsampled mask).
  /// Ids absent from the downsampled mask yield zero tokens + absence flags.
  TokenSet mask_pool(const FeatureMap& ft, const Mask& mask,
                     std::span<const Index> ids) const;

  DenseTokens make_dense_tokens(const FeatureMap& ft, const Mask& mask) const;

  /// Appends/overwrites memory per flags; `first_frame` controls replacing
  /// the seeded point tokens and writing the frozen dense slot.
  void memory_update(MemoryState& mem, const TokenSet& pooled,
                     const DenseTokens& dense, const RunFlags& flags,
                     bool first_frame) const;

  /// Full pipeline: frame 1 seeds memory from point tokens, later frames
  /// segment against the grown memory. Deterministic for fixed weights.
  InferResult infer_video(const VideoSample& sample, const PointSet& points,
                          const RunFlags& flags,
                          const InferOptions& opts = {}) const;

 private:
  Tensor add_param(const std::string& name, const Shape& shape, double std_dev,
                   Rng& rng);
  AttentionParams attention(const std::string& prefix) const;
  Tensor ln_affine(const Tensor& x, const std::string& prefix) const;
  // One conv trunk stage: `downs` stride-2 convs to `width` channels, then a
  // residual block at that width.
  Tensor conv_stage(const Tensor& x, const std::string& prefix, int downs) const;
  // Self-attention (plain) + residual cross-attention between two token maps.
  void enhance_pair(Tensor& a, Tensor& b, const std::string& prefix,
                    Tensor* a_self, Tensor* b_self) const;
  Tensor fuse_channels(const Tensor& cat_map) const;

  ModelConfig config_;
  NamedTensors params_;
};

}  // namespace clickseg

#pragma once

#include <cstdint>
#include <vector>

#include "clickseg/rng.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

enum class ShapeKind { kRectangle, kEllipse, kTriangle };

/// One moving textured shape. Centers and velocities are in pixels; with the
/// default integer velocities and zero rotation the rendered coverage
/// translates exactly, which makes the analytic flow warp-exact.
struct ObjectSpec {
  ShapeKind kind = ShapeKind::kRectangle;
  double cx = 0.0, cy = 0.0;     // frame-1 center
  double rx = 4.0, ry = 4.0;     // half extents
  double vx = 0.0, vy = 0.0;     // px/frame
  double rot_rate = 0.0;         // rad/frame, optional
  double color[3] = {0.8, 0.2, 0.2};
  double texture_amp = 0.08;     // per-channel noise riding on the fill color
};

struct SceneSpec {
  Index h = 64, w = 64, t = 8;
  std::vector<ObjectSpec> objects;  // painter's order: later entries occlude
  std::uint64_t background_seed = 0;
  bool allow_occlusion = true;
  std::uint64_t seed = 0;
  double v_max = 4.0;  // flow values promise |dx|,|dy| <= v_max
  int n_max = 8;       // scene-level cap on object count
};

/// Renders frames, labels, and the analytic flow (flow of frame t indexed at
/// frame t-1 pixels; flows[0] == flows[1]). The same SceneSpec always
/// produces the same sample.
VideoSample gen_sequence(const SceneSpec& spec);

/// Random scene: every object visible in frame 1, centers kept inside the
/// canvas across all frames, colors far from the mid-gray background, nonzero
/// integer velocities. With force_occlusion, two objects are put on crossing
/// paths that overlap mid-sequence.
SceneSpec random_scene(Rng& rng, Index h, Index w, Index t, int n_objects,
                       bool force_occlusion);

}  // namespace clickseg

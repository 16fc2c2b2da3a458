#pragma once

#include <vector>

#include "clickseg/annotate.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

/// p_t = p_{t-1} + flow_t(p_{t-1}), rounded to the nearest pixel and clamped
/// to the image bounds.
Point advect_point(const Point& point, const Flow& flow);

/// BFS flood fill over 4-connectivity admitting pixels whose color lies
/// within Euclidean distance tau of the seed pixel's color.
Bitmap region_grow(const Frame& frame, const Point& seed, double tau);

/// Track each object's click by flow advection, grow a region around every
/// tracked point, and resolve overlaps toward the nearer seed (ties to the
/// lower object id).
std::vector<Mask> run_baseline(const VideoSample& sample, const PointSet& points, double tau);

constexpr double kBaselineTau = 0.15;

}  // namespace clickseg

#include "clickseg/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace clickseg {

Point advect_point(const Point& point, const Flow& flow) {
  const double nx = static_cast<double>(point.x) + flow.dx(point.y, point.x);
  const double ny = static_cast<double>(point.y) + flow.dy(point.y, point.x);
  Point out = point;
  out.x = std::clamp<Index>(static_cast<Index>(std::llround(nx)), 0, flow.w - 1);
  out.y = std::clamp<Index>(static_cast<Index>(std::llround(ny)), 0, flow.h - 1);
  return out;
}

Bitmap region_grow(const Frame& frame, const Point& seed, double tau) {
  if (seed.x < 0 || seed.x >= frame.w || seed.y < 0 || seed.y >= frame.h)
    throw ShapeError("region_grow: seed out of bounds");
  // tau == 0 is legal: it admits only pixels whose color equals the seed's.
  if (tau < 0.0) throw ShapeError("region_grow: tau must be non-negative");

  const double sr = frame.at(seed.y, seed.x, 0);
  const double sg = frame.at(seed.y, seed.x, 1);
  const double sb = frame.at(seed.y, seed.x, 2);
  auto admit = [&](Index y, Index x) {
    return std::hypot(frame.at(y, x, 0) - sr, frame.at(y, x, 1) - sg,
                      frame.at(y, x, 2) - sb) <= tau;
  };

  Bitmap mask(frame.h, frame.w);
  std::queue<std::pair<Index, Index>> queue;
  mask.at(seed.y, seed.x) = 1;
  queue.emplace(seed.y, seed.x);
  while (!queue.empty()) {
    const auto [y, x] = queue.front();
    queue.pop();
    const Index ny[4] = {y - 1, y + 1, y, y};
    const Index nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= frame.h || nx[k] < 0 || nx[k] >= frame.w) continue;
      if (mask.at(ny[k], nx[k]) || !admit(ny[k], nx[k])) continue;
      mask.at(ny[k], nx[k]) = 1;
      queue.emplace(ny[k], nx[k]);
    }
  }
  return mask;
}

std::vector<Mask> run_baseline(const VideoSample& sample, const PointSet& points,
                               double tau) {
  std::vector<Point> seeds;
  for (const auto& p : points.points)
    if (p.id != 0) seeds.push_back(p);
  std::sort(seeds.begin(), seeds.end(),
            [](const Point& a, const Point& b) { return a.id < b.id; });

  std::vector<Mask> out;
  for (Index t = 0; t < sample.t; ++t) {
    if (t > 0)
      for (auto& seed : seeds) seed = advect_point(seed, sample.flows[t]);

    Mask mask(sample.h, sample.w);
    std::vector<double> best(static_cast<std::size_t>(sample.h * sample.w), 0.0);
    for (const auto& seed : seeds) {
      const Bitmap region = region_grow(sample.frames[t], seed, tau);
      for (Index y = 0; y < sample.h; ++y)
        for (Index x = 0; x < sample.w; ++x) {
          if (!region.at(y, x)) continue;
          const double d = std::hypot(static_cast<double>(x - seed.x),
                                      static_cast<double>(y - seed.y));
          std::uint8_t& label = mask.at(y, x);
          // contested pixels go to the nearer seed; ties keep the lower id
          if (label == 0 || d < best[y * sample.w + x]) {
            label = static_cast<std::uint8_t>(seed.id);
            best[y * sample.w + x] = d;
          }
        }
    }
    out.push_back(std::move(mask));
  }
  return out;
}

}  // namespace clickseg

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "clickseg/rng.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

struct Point {
  int id = 0;  // 0 = background
  Index x = 0, y = 0;
};

/// One point per object id present in frame 1, background included, ordered
/// by id with the background first.
struct PointSet {
  std::vector<Point> points;

  const Point* find(int id) const {
    for (const auto& p : points)
      if (p.id == id) return &p;
    return nullptr;
  }
};

/// Binary region as an explicit bitmap.
struct Bitmap {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> data;  // 0/1

  Bitmap() = default;
  Bitmap(Index height, Index width)
      : h(height), w(width), data(static_cast<std::size_t>(height * width), 0) {}

  std::uint8_t& at(Index y, Index x) { return data[y * w + x]; }
  std::uint8_t at(Index y, Index x) const { return data[y * w + x]; }
  Index count() const;
};

Bitmap mask_region(const Mask& mask, int label);

/// Morphological erosion with the full 3x3 structuring element, applied
/// `iterations` times; pixels beyond the image border count as unset.
Bitmap erode_mask(const Bitmap& mask, int iterations);

/// Morphological dilation, the erosion's dual (3x3 full element).
Bitmap dilate_mask(const Bitmap& mask, int iterations);

/// Uniformly random set pixel. Throws ShapeError on an empty region (the
/// caller owns the fallback rule).
Point sample_point(const Bitmap& mask, Rng& rng);

/// Per object: erode by max(1, floor(0.1 * min bbox side)) iterations, fall
/// back to the un-eroded region if erosion empties it, then sample. The
/// background point is sampled from the un-eroded background.
PointSet annotate_first_frame(const Mask& gt_mask, std::uint64_t seed);

/// Points file schema:
/// {"background": {"x":..,"y":..}, "objects": [{"id":1,"x":..,"y":..}, ...]}
void save_points(const std::filesystem::path& path, const PointSet& points);

/// Loads and validates: background present, unique positive object ids, and,
/// when bounds/mask context is given, coordinates in range (mask membership
/// is checked only against a supplied ground-truth mask).
PointSet load_points(const std::filesystem::path& path, Index w = 0, Index h = 0,
                     const Mask* gt_mask = nullptr);

/// Self-healing suite corruption: each object region is independently eroded
/// or dilated until its area changes by about `strength` (fraction), then the
/// label map is recomposed in ascending id order.
Mask corrupt_mask(const Mask& mask, double strength, Rng& rng);

}  // namespace clickseg

#include "clickseg/annotate.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <set>

namespace clickseg {

namespace {

[[noreturn]] void schema_fail(const std::filesystem::path& path, const std::string& why) {
  throw FormatError(path.string() + ": " + why);
}

struct Bbox {
  Index x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  bool empty() const { return x1 < x0; }
  Index height() const { return y1 - y0 + 1; }
  Index width() const { return x1 - x0 + 1; }
};

Bbox bounding_box(const Bitmap& region) {
  Bbox b{region.w, region.h, -1, -1};
  for (Index y = 0; y < region.h; ++y)
    for (Index x = 0; x < region.w; ++x)
      if (region.at(y, x)) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  return b;
}

Bitmap morph(const Bitmap& mask, int iterations, bool erode) {
  Bitmap cur = mask;
  for (int it = 0; it < iterations; ++it) {
    Bitmap next(cur.h, cur.w);
    for (Index y = 0; y < cur.h; ++y)
      for (Index x = 0; x < cur.w; ++x) {
        bool all = true, any = false;
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index ny = y + dy, nx = x + dx;
            const bool set =
                ny >= 0 && ny < cur.h && nx >= 0 && nx < cur.w && cur.at(ny, nx) != 0;
            all = all && set;
            any = any || set;
          }
        next.at(y, x) = erode ? (all ? 1 : 0) : (any ? 1 : 0);
      }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

Index Bitmap::count() const {
  Index n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

Bitmap mask_region(const Mask& mask, int label) {
  Bitmap region(mask.h, mask.w);
  for (Index i = 0; i < mask.h * mask.w; ++i)
    region.data[i] = mask.data[i] == label ? 1 : 0;
  return region;
}

Bitmap erode_mask(const Bitmap& mask, int iterations) { return morph(mask, iterations, true); }

Bitmap dilate_mask(const Bitmap& mask, int iterations) {
  return morph(mask, iterations, false);
}

Point sample_point(const Bitmap& mask, Rng& rng) {
  const Index n = mask.count();
  if (n == 0) throw ShapeError("sample_point: empty region");
  Index target = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  for (Index y = 0; y < mask.h; ++y)
    for (Index x = 0; x < mask.w; ++x)
      if (mask.at(y, x) && target-- == 0) return Point{0, x, y};
  throw std::logic_error("sample_point: unreachable");
}

PointSet annotate_first_frame(const Mask& gt_mask, std::uint64_t seed) {
  std::set<int> labels(gt_mask.data.begin(), gt_mask.data.end());
  if (!labels.count(0))
    throw ShapeError("annotate: mask has no background pixel");
  if (labels.size() < 2) throw ShapeError("annotate: mask has no object");

  Rng rng(seed);
  PointSet out;

  Bitmap bg = mask_region(gt_mask, 0);
  Point p = sample_point(bg, rng);
  p.id = 0;
  out.points.push_back(p);

  for (int label : labels) {
    if (label == 0) continue;
    Bitmap region = mask_region(gt_mask, label);
    if (region.count() == 0)
      throw ShapeError("annotate: object " + std::to_string(label) + " has zero pixels");
    const Bbox box = bounding_box(region);
    const int e =
        std::max<int>(1, static_cast<int>(0.1 * std::min(box.height(), box.width())));
    Bitmap eroded = erode_mask(region, e);
    if (eroded.count() == 0) eroded = region;  // thin-object fallback
    Point q = sample_point(eroded, rng);
    q.id = label;
    out.points.push_back(q);
  }
  return out;
}

void save_points(const std::filesystem::path& path, const PointSet& points) {
  const Point* bg = points.find(0);
  if (!bg) throw ShapeError("save_points: background point missing");
  nlohmann::json j;
  j["background"] = {{"x", bg->x}, {"y", bg->y}};
  j["objects"] = nlohmann::json::array();
  for (const auto& p : points.points)
    if (p.id != 0) j["objects"].push_back({{"id", p.id}, {"x", p.x}, {"y", p.y}});
  std::ofstream out(path);
  if (!out) schema_fail(path, "cannot open for writing");
  out << j.dump(2) << "\n";
}

PointSet load_points(const std::filesystem::path& path, Index w, Index h,
                     const Mask* gt_mask) {
  std::ifstream in(path);
  if (!in) schema_fail(path, "cannot open for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    schema_fail(path, e.what());
  }

  PointSet out;
  try {
    if (!j.contains("background")) schema_fail(path, "background point missing");
    out.points.push_back(
        Point{0, j["background"].at("x").get<Index>(), j["background"].at("y").get<Index>()});
    std::set<int> seen;
    for (const auto& obj : j.at("objects")) {
      Point p{obj.at("id").get<int>(), obj.at("x").get<Index>(), obj.at("y").get<Index>()};
      if (p.id <= 0) schema_fail(path, "object id must be positive");
      if (!seen.insert(p.id).second)
        schema_fail(path, "duplicate object id " + std::to_string(p.id));
      out.points.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    schema_fail(path, e.what());
  }
  std::sort(out.points.begin(), out.points.end(),
            [](const Point& a, const Point& b) { return a.id < b.id; });

  if (gt_mask) {
    w = gt_mask->w;
    h = gt_mask->h;
  }
  if (w > 0 && h > 0)
    for (const auto& p : out.points)
      if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= h)
        schema_fail(path, "point for id " + std::to_string(p.id) + " out of bounds");
  if (gt_mask)
    for (const auto& p : out.points)
      if (gt_mask->at(p.y, p.x) != p.id)
        schema_fail(path, "point for id " + std::to_string(p.id) +
                              " is not inside its mask region");
  return out;
}

Mask corrupt_mask(const Mask& mask, double strength, Rng& rng) {
  Mask out(mask.h, mask.w);
  std::set<int> labels(mask.data.begin(), mask.data.end());
  for (int label : labels) {
    if (label == 0) continue;
    Bitmap region = mask_region(mask, label);
    const Index base = region.count();
    const bool grow = rng.below(2) == 1;
    Bitmap cur = region;
    for (int it = 0; it < 10; ++it) {
      Bitmap next = grow ? dilate_mask(cur, 1) : erode_mask(cur, 1);
      if (!grow && next.count() == 0) break;  // keep at least one pixel
      cur = std::move(next);
      const double change =
          std::abs(static_cast<double>(cur.count() - base)) / static_cast<double>(base);
      if (change >= strength) break;
    }
    if (cur.count() == 0) cur = region;
    for (Index i = 0; i < mask.h * mask.w; ++i)
      if (cur.data[i]) out.data[i] = static_cast<std::uint8_t>(label);
  }
  return out;
}

}  // namespace clickseg

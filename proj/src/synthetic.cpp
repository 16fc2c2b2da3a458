#include "clickseg/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace clickseg {

namespace {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

Vec2 center_at(const ObjectSpec& o, Index t) {
  return {o.cx + o.vx * static_cast<double>(t), o.cy + o.vy * static_cast<double>(t)};
}

// Pixel-center point in object-local coordinates at frame t.
Vec2 to_local(const ObjectSpec& o, Index t, double px, double py) {
  const Vec2 c = center_at(o, t);
  const double dx = px - c.x, dy = py - c.y;
  if (o.rot_rate == 0.0) return {dx, dy};
  const double a = -o.rot_rate * static_cast<double>(t);
  return {dx * std::cos(a) - dy * std::sin(a), dx * std::sin(a) + dy * std::cos(a)};
}

bool covers_local(const ObjectSpec& o, const Vec2& u) {
  switch (o.kind) {
    case ShapeKind::kRectangle:
      return std::abs(u.x) <= o.rx && std::abs(u.y) <= o.ry;
    case ShapeKind::kEllipse: {
      const double ex = u.x / o.rx, ey = u.y / o.ry;
      return ex * ex + ey * ey <= 1.0;
    }
    case ShapeKind::kTriangle: {
      // Apex up: A = (0, -ry), B = (-rx, ry), C = (rx, ry).
      if (u.y > o.ry) return false;
      const double half_width = o.rx * (u.y + o.ry) / (2.0 * o.ry);
      return u.y >= -o.ry && std::abs(u.x) <= half_width;
    }
  }
  return false;
}

double background_value(std::uint64_t seed, Index y, Index x, Index channel) {
  // Value noise: bilinear interpolation of a hashed 8-px lattice.
  const double fy = static_cast<double>(y) / 8.0, fx = static_cast<double>(x) / 8.0;
  const auto iy = static_cast<std::uint64_t>(fy), ix = static_cast<std::uint64_t>(fx);
  const double ty = fy - static_cast<double>(iy), tx = fx - static_cast<double>(ix);
  const std::uint64_t cs = seed * 3 + static_cast<std::uint64_t>(channel);
  const double v00 = hash_unit(cs, iy, ix);
  const double v01 = hash_unit(cs, iy, ix + 1);
  const double v10 = hash_unit(cs, iy + 1, ix);
  const double v11 = hash_unit(cs, iy + 1, ix + 1);
  const double top = v00 * (1.0 - tx) + v01 * tx;
  const double bot = v10 * (1.0 - tx) + v11 * tx;
  const double n = top * (1.0 - ty) + bot * ty;
  return 0.38 + 0.24 * n;  // low-contrast mid-gray band
}

double object_texture(std::uint64_t obj_seed, const Vec2& u, Index channel) {
  // Noise pinned to the object-local integer lattice so it travels (and
  // rotates) with the shape. The +256.5 offset keeps lattice indices positive.
  const auto iu = static_cast<std::uint64_t>(u.x + 256.5);
  const auto iv = static_cast<std::uint64_t>(u.y + 256.5);
  return 2.0 * hash_unit(obj_seed + static_cast<std::uint64_t>(channel), iu, iv) - 1.0;
}

}  // namespace

VideoSample gen_sequence(const SceneSpec& spec) {
  const Index n = static_cast<Index>(spec.objects.size());
  if (n < 1 || n > spec.n_max)
    throw ConfigError("scene must hold between 1 and " + std::to_string(spec.n_max) +
                      " objects, got " + std::to_string(n));
  if (spec.h <= 0 || spec.w <= 0 || spec.t <= 0)
    throw ConfigError("scene dimensions must be positive");
  if (n > 254) throw ConfigError("object ids must fit an 8-bit label map");

  VideoSample sample;
  sample.h = spec.h;
  sample.w = spec.w;
  sample.t = spec.t;
  sample.seed = spec.seed;
  for (Index i = 0; i < n; ++i) sample.object_ids.push_back(static_cast<int>(i) + 1);

  std::vector<std::uint64_t> obj_seeds(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    obj_seeds[i] = hash_mix(spec.seed, 0x0b1ec7ULL, static_cast<std::uint64_t>(i));

  std::vector<Index> alone_count(static_cast<std::size_t>(n), 0);
  std::vector<Index> visible_count(static_cast<std::size_t>(n), 0);

  for (Index t = 0; t < spec.t; ++t) {
    Frame frame(spec.h, spec.w);
    Mask mask(spec.h, spec.w);
    std::fill(alone_count.begin(), alone_count.end(), 0);
    std::fill(visible_count.begin(), visible_count.end(), 0);

    for (Index y = 0; y < spec.h; ++y) {
      for (Index x = 0; x < spec.w; ++x) {
        for (Index c = 0; c < 3; ++c)
          frame.at(y, x, c) = background_value(spec.background_seed, y, x, c);
        // painter's order: later objects overwrite earlier ones
        for (Index i = 0; i < n; ++i) {
          const ObjectSpec& o = spec.objects[i];
          const Vec2 u = to_local(o, t, x + 0.5, y + 0.5);
          if (!covers_local(o, u)) continue;
          ++alone_count[i];
          mask.at(y, x) = static_cast<std::uint8_t>(i + 1);
          for (Index c = 0; c < 3; ++c)
            frame.at(y, x, c) = std::clamp(
                o.color[c] + o.texture_amp * object_texture(obj_seeds[i], u, c), 0.0, 1.0);
        }
        if (mask.at(y, x) != 0) ++visible_count[mask.at(y, x) - 1];
      }
    }

    if (t == 0)
      for (Index i = 0; i < n; ++i)
        if (visible_count[i] == 0)
          throw ConfigError("object " + std::to_string(i + 1) +
                            " has no visible pixel in frame 1");
    for (Index i = 0; i < n; ++i)
      if (visible_count[i] < alone_count[i]) sample.occlusion = true;

    sample.frames.push_back(std::move(frame));
    sample.masks.push_back(std::move(mask));
  }

  // Flow for frame t (t >= 1): displacement of frame t-1's visible content,
  // indexed at frame t-1 pixels. Background is static.
  sample.flows.resize(spec.t, Flow(spec.h, spec.w));
  for (Index t = 1; t < spec.t; ++t) {
    Flow& flow = sample.flows[t];
    const Mask& prev = sample.masks[t - 1];
    for (Index y = 0; y < spec.h; ++y)
      for (Index x = 0; x < spec.w; ++x) {
        const std::uint8_t label = prev.at(y, x);
        if (label == 0) continue;
        const ObjectSpec& o = spec.objects[label - 1];
        double dx = o.vx, dy = o.vy;
        if (o.rot_rate != 0.0) {
          const Vec2 u = to_local(o, t - 1, x + 0.5, y + 0.5);
          const Vec2 c = center_at(o, t);
          const double a = o.rot_rate * static_cast<double>(t);
          const double nx = c.x + u.x * std::cos(a) - u.y * std::sin(a);
          const double ny = c.y + u.x * std::sin(a) + u.y * std::cos(a);
          dx = nx - (x + 0.5);
          dy = ny - (y + 0.5);
        }
        flow.dx(y, x) = std::clamp(dx, -spec.v_max, spec.v_max);
        flow.dy(y, x) = std::clamp(dy, -spec.v_max, spec.v_max);
      }
  }
  if (spec.t > 1) sample.flows[0] = sample.flows[1];
  return sample;
}

SceneSpec random_scene(Rng& rng, Index h, Index w, Index t, int n_objects,
                       bool force_occlusion) {
  if (n_objects < 1) throw ConfigError("random_scene needs at least one object");
  if (force_occlusion && n_objects < 2)
    throw ConfigError("force_occlusion needs at least two objects");

  // Geometry budget scaled to the canvas so small canvases stay feasible.
  const double limit = static_cast<double>(std::min(h, w));
  const double max_extent = std::clamp(limit / 6.0, 3.0, 10.0);
  const double min_extent = std::max(3.0, 0.55 * max_extent);
  const double margin = max_extent + 2.0;
  if (static_cast<double>(w) - 2.0 * margin < 1.0 ||
      static_cast<double>(h) - 2.0 * margin < 1.0)
    throw ConfigError("random_scene: canvas " + std::to_string(h) + "x" +
                      std::to_string(w) + " cannot hold an object of extent " +
                      std::to_string(max_extent));

  auto sample_color = [&](double out[3]) {
    for (int c = 0; c < 3; ++c)
      out[c] = rng.below(2) ? rng.uniform(0.72, 0.95) : rng.uniform(0.05, 0.28);
  };
  auto color_dist = [](const double a[3], const double b[3]) {
    return std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
  };
  auto sample_shape = [&] {
    switch (rng.below(3)) {
      case 0: return ShapeKind::kRectangle;
      case 1: return ShapeKind::kEllipse;
      default: return ShapeKind::kTriangle;
    }
  };
  auto nonzero_velocity = [&](double cap) {
    double vx = 0.0, vy = 0.0;
    while (vx == 0.0 && vy == 0.0) {
      vx = static_cast<double>(rng.range(-static_cast<std::int64_t>(cap),
                                         static_cast<std::int64_t>(cap)));
      vy = static_cast<double>(rng.range(-static_cast<std::int64_t>(cap),
                                         static_cast<std::int64_t>(cap)));
    }
    return Vec2{vx, vy};
  };

  auto in_canvas_for_all_frames = [&](const ObjectSpec& o) {
    for (Index f = 0; f < t; ++f) {
      const Vec2 c = center_at(o, f);
      if (c.x < margin || c.x > static_cast<double>(w) - margin || c.y < margin ||
          c.y > static_cast<double>(h) - margin)
        return false;
    }
    return true;
  };
  auto frame1_separated = [&](const ObjectSpec& a, const ObjectSpec& b) {
    const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);
    return d >= std::max(a.rx, a.ry) + std::max(b.rx, b.ry) + 2.0;
  };

  // Draw a velocity, then place the center inside the interval that keeps the
  // whole trajectory in canvas — no rejection on the canvas constraint.
  auto place_plain = [&](ObjectSpec& o) {
    for (int tries = 0; tries < 64; ++tries) {
      const Vec2 v = nonzero_velocity(3.0);
      const double sx = v.x * static_cast<double>(t - 1);
      const double sy = v.y * static_cast<double>(t - 1);
      const double lox = margin - std::min(0.0, sx);
      const double hix = static_cast<double>(w) - margin - std::max(0.0, sx);
      const double loy = margin - std::min(0.0, sy);
      const double hiy = static_cast<double>(h) - margin - std::max(0.0, sy);
      if (lox > hix || loy > hiy) continue;
      o.vx = v.x;
      o.vy = v.y;
      o.cx = rng.uniform(lox, hix);
      o.cy = rng.uniform(loy, hiy);
      return true;
    }
    return false;
  };

  // Aim object 2 so its center coincides with object 1's center mid-sequence.
  // The velocity difference must separate them in frame 1 (their frame-1
  // center distance is exactly |v_diff|*t_meet, up to the +-1 px jitter).
  auto place_crossing = [&](ObjectSpec& o, const ObjectSpec& first) {
    const double t_meet = std::floor(static_cast<double>(t) / 2.0);
    if (t_meet < 1.0) return false;
    const Vec2 meet = center_at(first, static_cast<Index>(t_meet));
    const double need =
        std::max(first.rx, first.ry) + std::max(o.rx, o.ry) + 4.0;
    for (int tries = 0; tries < 256; ++tries) {
      const Vec2 v = nonzero_velocity(4.0);
      if (std::hypot(v.x - first.vx, v.y - first.vy) * t_meet < need) continue;
      o.vx = v.x;
      o.vy = v.y;
      o.cx = meet.x - v.x * t_meet + rng.uniform(-1.0, 1.0);
      o.cy = meet.y - v.y * t_meet + rng.uniform(-1.0, 1.0);
      if (!in_canvas_for_all_frames(o)) continue;
      return true;
    }
    return false;
  };

  for (int scene_try = 0; scene_try < 64; ++scene_try) {
    SceneSpec spec;
    spec.h = h;
    spec.w = w;
    spec.t = t;
    spec.seed = rng.next_u64();
    spec.background_seed = rng.next_u64();
    spec.allow_occlusion = true;

    bool ok = true;
    for (int i = 0; i < n_objects && ok; ++i) {
      ObjectSpec o;
      o.kind = sample_shape();
      // keep the crossing pair compact so the frame-1 separation requirement
      // stays reachable at legal speeds
      const bool crossing_pair = force_occlusion && i <= 1;
      const double hi = crossing_pair ? std::min(7.0, max_extent) : max_extent;
      o.rx = rng.uniform(min_extent, std::max(min_extent, hi));
      o.ry = rng.uniform(min_extent, std::max(min_extent, hi));
      o.texture_amp = rng.uniform(0.06, 0.1);

      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        sample_color(o.color);
        bool color_ok = true;
        for (const auto& other : spec.objects)
          color_ok = color_ok && color_dist(o.color, other.color) >= 0.3;
        if (!color_ok) continue;

        if (force_occlusion && i == 1) {
          if (!place_crossing(o, spec.objects[0])) continue;
        } else if (!place_plain(o)) {
          continue;
        }

        bool separated = true;
        for (const auto& other : spec.objects)
          separated = separated && frame1_separated(o, other);
        placed = separated;
      }
      if (!placed) ok = false;
      if (ok) spec.objects.push_back(o);
    }
    if (!ok) continue;
    if (!force_occlusion) return spec;
    // Render to confirm the crossing really covers pixels of the lower object.
    if (gen_sequence(spec).occlusion) return spec;
  }
  throw ConfigError("random_scene: no valid scene after 64 tries (h=" +
                    std::to_string(h) + " w=" + std::to_string(w) +
                    " t=" + std::to_string(t) +
                    " n=" + std::to_string(n_objects) + ")");
}

}  // namespace clickseg

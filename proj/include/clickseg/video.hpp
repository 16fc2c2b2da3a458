#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clickseg/common.hpp"

namespace clickseg {

/// 3-channel raster, row-major, (h, w, 3). Camera frames live in [0,1];
/// encoded flow images use [-1,1] channels.
struct Frame {
  Index h = 0, w = 0;
  std::vector<double> data;  // h * w * 3

  Frame() = default;
  Frame(Index height, Index width, double fill = 0.0)
      : h(height), w(width), data(static_cast<std::size_t>(height * width * 3), fill) {}

  double& at(Index y, Index x, Index c) { return data[(y * w + x) * 3 + c]; }
  double at(Index y, Index x, Index c) const { return data[(y * w + x) * 3 + c]; }
};

/// Integer label map, 0 = background.
struct Mask {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> data;  // h * w

  Mask() = default;
  Mask(Index height, Index width, std::uint8_t fill = 0)
      : h(height), w(width), data(static_cast<std::size_t>(height * width), fill) {}

  std::uint8_t& at(Index y, Index x) { return data[y * w + x]; }
  std::uint8_t at(Index y, Index x) const { return data[y * w + x]; }
};

/// Per-pixel displacement in pixels; dx, dy interleaved. The field stored for
/// frame t holds the motion of frame t-1's content toward frame t, indexed at
/// frame t-1 pixel positions.
struct Flow {
  Index h = 0, w = 0;
  std::vector<double> data;  // h * w * 2

  Flow() = default;
  Flow(Index height, Index width)
      : h(height), w(width), data(static_cast<std::size_t>(height * width * 2), 0.0) {}

  double& dx(Index y, Index x) { return data[(y * w + x) * 2]; }
  double dx(Index y, Index x) const { return data[(y * w + x) * 2]; }
  double& dy(Index y, Index x) { return data[(y * w + x) * 2 + 1]; }
  double dy(Index y, Index x) const { return data[(y * w + x) * 2 + 1]; }
};

/// One sequence: frames, flow fields (flows[0] == flows[1] by the O_1 = O_2
/// multiplexing rule), ground-truth masks, bookkeeping.
struct VideoSample {
  Index h = 0, w = 0, t = 0;
  std::vector<Frame> frames;
  std::vector<Flow> flows;
  std::vector<Mask> masks;
  std::vector<int> object_ids;  // foreground ids, ascending, excludes 0
  std::uint64_t seed = 0;
  bool occlusion = false;
};

/// (dx/v_max, dy/v_max, |(dx,dy)| / (sqrt(2) v_max)), each clipped to [-1,1].
Frame encode_flow(const Flow& flow, double v_max);

/// 8-bit image quantization used by the PPM container: round(255 * v),
/// clamped. Applying it in memory reproduces a disk round-trip.
Frame quantize8(const Frame& frame);

void write_ppm(const std::filesystem::path& path, const Frame& frame);
Frame read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm(const std::filesystem::path& path);
void write_flo(const std::filesystem::path& path, const Flow& flow);
Flow read_flo(const std::filesystem::path& path);

/// Directory layout: frames/000001.ppm.., masks/000001.pgm.., flow/000002.flo..
/// (frame 1 has no flow file; it reuses frame 2's on read), meta.json.
void write_sample(const VideoSample& sample, const std::filesystem::path& dir);
VideoSample read_sample(const std::filesystem::path& dir);

/// Predicted masks alone (same naming as the sample's masks/ directory).
void write_masks(const std::vector<Mask>& masks, const std::filesystem::path& dir);
std::vector<Mask> read_masks(const std::filesystem::path& dir);

}  // namespace clickseg

#include "clickseg/video.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace clickseg {

namespace fs = std::filesystem;

namespace {

constexpr float kFloMagic = 202021.25f;

[[noreturn]] void fail(const fs::path& path, const std::string& why) {
  throw FormatError(path.string() + ": " + why);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  return in;
}

// One netpbm header token; skips whitespace and '#' comment lines.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

struct PnmHeader {
  Index w = 0, h = 0;
};

PnmHeader read_pnm_header(std::istream& in, const fs::path& path, const char* magic) {
  if (pnm_token(in) != magic) fail(path, std::string("expected ") + magic + " magic");
  PnmHeader hd;
  try {
    hd.w = std::stoll(pnm_token(in));
    hd.h = std::stoll(pnm_token(in));
    if (std::stoll(pnm_token(in)) != 255) fail(path, "maxval must be 255");
  } catch (const std::logic_error&) {
    fail(path, "malformed header");
  }
  if (hd.w <= 0 || hd.h <= 0) fail(path, "non-positive dimensions");
  return hd;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

std::string frame_name(Index t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld%s", static_cast<long long>(t), ext);
  return buf;
}

}  // namespace

Frame encode_flow(const Flow& flow, double v_max) {
  if (v_max <= 0.0) throw ShapeError("encode_flow: v_max must be positive");
  Frame img(flow.h, flow.w);
  const double inv = 1.0 / v_max;
  const double inv_mag = 1.0 / (std::sqrt(2.0) * v_max);
  auto clip = [](double v) { return std::clamp(v, -1.0, 1.0); };
  for (Index y = 0; y < flow.h; ++y)
    for (Index x = 0; x < flow.w; ++x) {
      const double dx = flow.dx(y, x), dy = flow.dy(y, x);
      img.at(y, x, 0) = clip(dx * inv);
      img.at(y, x, 1) = clip(dy * inv);
      img.at(y, x, 2) = clip(std::hypot(dx, dy) * inv_mag);
    }
  return img;
}

Frame quantize8(const Frame& frame) {
  Frame out(frame.h, frame.w);
  for (std::size_t i = 0; i < frame.data.size(); ++i) {
    const double q = std::clamp(std::round(255.0 * frame.data[i]), 0.0, 255.0);
    out.data[i] = q / 255.0;
  }
  return out;
}

void write_ppm(const fs::path& path, const Frame& frame) {
  auto out = open_out(path);
  out << "P6\n" << frame.w << " " << frame.h << "\n255\n";
  std::vector<unsigned char> bytes(frame.data.size());
  for (std::size_t i = 0; i < frame.data.size(); ++i)
    bytes[i] =
        static_cast<unsigned char>(std::clamp(std::round(255.0 * frame.data[i]), 0.0, 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(path, "short write");
}

Frame read_ppm(const fs::path& path) {
  auto in = open_in(path);
  const PnmHeader hd = read_pnm_header(in, path, "P6");
  Frame frame(hd.h, hd.w);
  std::vector<unsigned char> bytes(frame.data.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) fail(path, "truncated pixel data");
  for (std::size_t i = 0; i < bytes.size(); ++i) frame.data[i] = bytes[i] / 255.0;
  return frame;
}

void write_pgm(const fs::path& path, const Mask& mask) {
  auto out = open_out(path);
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.data.data()),
            static_cast<std::streamsize>(mask.data.size()));
  if (!out) fail(path, "short write");
}

Mask read_pgm(const fs::path& path) {
  auto in = open_in(path);
  const PnmHeader hd = read_pnm_header(in, path, "P5");
  Mask mask(hd.h, hd.w);
  in.read(reinterpret_cast<char*>(mask.data.data()),
          static_cast<std::streamsize>(mask.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(mask.data.size()))
    fail(path, "truncated pixel data");
  return mask;
}

void write_flo(const fs::path& path, const Flow& flow) {
  auto out = open_out(path);
  put_f32(out, kFloMagic);
  put_u32(out, static_cast<std::uint32_t>(flow.w));
  put_u32(out, static_cast<std::uint32_t>(flow.h));
  for (Index y = 0; y < flow.h; ++y)
    for (Index x = 0; x < flow.w; ++x) {
      put_f32(out, static_cast<float>(flow.dx(y, x)));
      put_f32(out, static_cast<float>(flow.dy(y, x)));
    }
  if (!out) fail(path, "short write");
}

Flow read_flo(const fs::path& path) {
  auto in = open_in(path);
  const float magic = get_f32(in);
  if (!in || magic != kFloMagic) fail(path, "bad flow magic");
  const auto w = static_cast<Index>(get_u32(in));
  const auto h = static_cast<Index>(get_u32(in));
  if (!in || w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20)
    fail(path, "bad flow dimensions");
  Flow flow(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      flow.dx(y, x) = get_f32(in);
      flow.dy(y, x) = get_f32(in);
    }
  if (!in) fail(path, "truncated flow data");
  return flow;
}

void write_sample(const VideoSample& sample, const fs::path& dir) {
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "flow");
  for (Index t = 0; t < sample.t; ++t) {
    write_ppm(dir / "frames" / frame_name(t + 1, ".ppm"), sample.frames[t]);
    write_pgm(dir / "masks" / frame_name(t + 1, ".pgm"), sample.masks[t]);
    if (t >= 1) write_flo(dir / "flow" / frame_name(t + 1, ".flo"), sample.flows[t]);
  }
  nlohmann::json meta;
  meta["h"] = sample.h;
  meta["w"] = sample.w;
  meta["t"] = sample.t;
  meta["object_ids"] = sample.object_ids;
  meta["seed"] = sample.seed;
  meta["occlusion"] = sample.occlusion;
  auto out = open_out(dir / "meta.json");
  out << meta.dump(2) << "\n";
}

VideoSample read_sample(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  auto in = open_in(meta_path);
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    fail(meta_path, e.what());
  }

  VideoSample sample;
  try {
    sample.h = meta.at("h").get<Index>();
    sample.w = meta.at("w").get<Index>();
    sample.t = meta.at("t").get<Index>();
    sample.object_ids = meta.at("object_ids").get<std::vector<int>>();
    sample.seed = meta.at("seed").get<std::uint64_t>();
    sample.occlusion = meta.at("occlusion").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(meta_path, e.what());
  }
  if (sample.t <= 0 || sample.h <= 0 || sample.w <= 0) fail(meta_path, "bad dimensions");

  for (Index t = 0; t < sample.t; ++t) {
    Frame frame = read_ppm(dir / "frames" / frame_name(t + 1, ".ppm"));
    Mask mask = read_pgm(dir / "masks" / frame_name(t + 1, ".pgm"));
    if (frame.h != sample.h || frame.w != sample.w)
      fail(dir / "frames" / frame_name(t + 1, ".ppm"), "dimension mismatch with meta");
    if (mask.h != sample.h || mask.w != sample.w)
      fail(dir / "masks" / frame_name(t + 1, ".pgm"), "dimension mismatch with meta");
    sample.frames.push_back(std::move(frame));
    sample.masks.push_back(std::move(mask));
  }
  sample.flows.resize(sample.t);
  for (Index t = 1; t < sample.t; ++t) {
    sample.flows[t] = read_flo(dir / "flow" / frame_name(t + 1, ".flo"));
    if (sample.flows[t].h != sample.h || sample.flows[t].w != sample.w)
      fail(dir / "flow" / frame_name(t + 1, ".flo"), "dimension mismatch with meta");
  }
  sample.flows[0] = sample.t > 1 ? sample.flows[1] : Flow(sample.h, sample.w);
  return sample;
}

void write_masks(const std::vector<Mask>& masks, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < masks.size(); ++t)
    write_pgm(dir / frame_name(static_cast<Index>(t) + 1, ".pgm"), masks[t]);
}

std::vector<Mask> read_masks(const fs::path& dir) {
  std::vector<Mask> masks;
  for (Index t = 1;; ++t) {
    const fs::path p = dir / frame_name(t, ".pgm");
    if (!fs::exists(p)) break;
    masks.push_back(read_pgm(p));
  }
  if (masks.empty()) throw FormatError(dir.string() + ": no mask files found");
  return masks;
}

}  // namespace clickseg

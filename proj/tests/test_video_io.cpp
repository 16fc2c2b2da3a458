#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "clickseg/checkpoint.hpp"
#include "clickseg/rng.hpp"
#include "clickseg/synthetic.hpp"
#include "clickseg/video.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() / (std::string("clickseg_test_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("flow encoding formula and round trip") {
  SUBCASE("zero flow encodes to zero channels") {
    Flow flow(2, 2);
    Frame img = encode_flow(flow, 4.0);
    for (double v : img.data) CHECK(v == 0.0);
  }

  SUBCASE("flow (v_max, 0) encodes to (1, 0, 1/sqrt(2))") {
    Flow flow(1, 1);
    flow.dx(0, 0) = 4.0;
    Frame img = encode_flow(flow, 4.0);
    CHECK(img.at(0, 0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(img.at(0, 0, 1) == 0.0);
    CHECK(img.at(0, 0, 2) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  }

  SUBCASE("decode of channels 1-2 re-encodes identically inside the clip range") {
    Rng rng(71);
    const double v_max = 4.0;
    Flow flow(5, 7);
    for (Index y = 0; y < 5; ++y)
      for (Index x = 0; x < 7; ++x) {
        flow.dx(y, x) = rng.uniform(-v_max, v_max);
        flow.dy(y, x) = rng.uniform(-v_max, v_max);
      }
    Frame img = encode_flow(flow, v_max);
    Flow decoded(5, 7);
    for (Index y = 0; y < 5; ++y)
      for (Index x = 0; x < 7; ++x) {
        decoded.dx(y, x) = img.at(y, x, 0) * v_max;
        decoded.dy(y, x) = img.at(y, x, 1) * v_max;
      }
    Frame img2 = encode_flow(decoded, v_max);
    for (std::size_t i = 0; i < img.data.size(); ++i)
      CHECK(img2.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("1x1 flow file is 20 bytes and reads back bit-identically") {
  const fs::path dir = temp_dir("flo");
  Flow flow(1, 1);
  flow.dx(0, 0) = 1.5;
  flow.dy(0, 0) = -2.25;
  const fs::path path = dir / "f.flo";
  write_flo(path, flow);
  // 12-byte header (magic, width, height) + 8-byte payload (two f32 values)
  CHECK(fs::file_size(path) == 20);
  Flow back = read_flo(path);
  REQUIRE(back.h == 1);
  REQUIRE(back.w == 1);
  CHECK(back.dx(0, 0) == 1.5);
  CHECK(back.dy(0, 0) == -2.25);
  fs::remove_all(dir);
}

TEST_CASE("PGM round-trips label maps exactly") {
  const fs::path dir = temp_dir("pgm");
  Mask mask(3, 4);
  const std::uint8_t labels[] = {0, 1, 2, 0, 1, 1, 2, 2, 0, 0, 1, 2};
  std::copy(std::begin(labels), std::end(labels), mask.data.begin());
  write_pgm(dir / "m.pgm", mask);
  Mask back = read_pgm(dir / "m.pgm");
  REQUIRE(back.h == 3);
  REQUIRE(back.w == 4);
  CHECK(back.data == mask.data);
  fs::remove_all(dir);
}

TEST_CASE("PPM quantizes by round(255 v) and reads back that quantization") {
  const fs::path dir = temp_dir("ppm");
  Frame frame(2, 2);
  Rng rng(5);
  for (auto& v : frame.data) v = rng.uniform();
  write_ppm(dir / "f.ppm", frame);
  Frame back = read_ppm(dir / "f.ppm");
  Frame expect = quantize8(frame);
  REQUIRE(back.data.size() == expect.data.size());
  for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == expect.data[i]);
  fs::remove_all(dir);
}

TEST_CASE("malformed image and flow files fail with the path in the message") {
  const fs::path dir = temp_dir("bad");
  {
    std::ofstream out(dir / "bad.ppm", std::ios::binary);
    out << "P5\n2 2\n255\n";  // wrong magic for a PPM
  }
  try {
    read_ppm(dir / "bad.ppm");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("bad.ppm") != std::string::npos);
  }
  {
    std::ofstream out(dir / "bad.flo", std::ios::binary);
    out << "nonsense";
  }
  CHECK_THROWS_AS((void)read_flo(dir / "bad.flo"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("randomized sample directory round-trip") {
  SceneSpec spec;
  spec.h = spec.w = 16;
  spec.t = 4;
  spec.seed = 97;
  spec.background_seed = 98;
  ObjectSpec obj;
  obj.rx = obj.ry = 4.0;
  obj.cx = obj.cy = 8.0;
  obj.vx = 1.0;
  obj.vy = 0.0;
  spec.objects.push_back(obj);
  VideoSample sample = gen_sequence(spec);

  const fs::path dir = temp_dir("sample");
  write_sample(sample, dir);
  VideoSample back = read_sample(dir);

  REQUIRE(back.t == sample.t);
  REQUIRE(back.h == sample.h);
  REQUIRE(back.w == sample.w);
  CHECK(back.object_ids == sample.object_ids);
  CHECK(back.seed == sample.seed);
  CHECK(back.occlusion == sample.occlusion);
  for (Index t = 0; t < sample.t; ++t) {
    CHECK(back.masks[t].data == sample.masks[t].data);
    const Frame expect = quantize8(sample.frames[t]);
    for (std::size_t i = 0; i < expect.data.size(); ++i)
      CHECK(back.frames[t].data[i] == expect.data[i]);
    // synthetic flows are small integers, exactly representable in f32
    for (std::size_t i = 0; i < sample.flows[t].data.size(); ++i)
      CHECK(back.flows[t].data[i] == sample.flows[t].data[i]);
  }
  // frame 1 reuses frame 2's flow on disk
  CHECK(back.flows[0].data == back.flows[1].data);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trips names, shapes, and exact bits") {
  const fs::path dir = temp_dir("ckpt");
  Rng rng(13);
  NamedTensors entries;
  entries.emplace_back("encoder/w0", Tensor::from_data({2, 3}, {0.1, -0.2, 0.3, 1e-300,
                                                               -1e300, 5.0}));
  std::vector<double> vals(24);
  for (auto& v : vals) v = rng.normal();
  entries.emplace_back("bank/rows", Tensor::from_data({4, 6}, vals));
  entries.emplace_back("config/stride", Tensor::scalar(4.0));

  const fs::path path = dir / "w.ckpt";
  save_checkpoint(path, entries);
  NamedTensors back = load_checkpoint(path);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].first == entries[i].first);
    REQUIRE(back[i].second.shape() == entries[i].second.shape());
    for (Index k = 0; k < entries[i].second.size(); ++k)
      CHECK(back[i].second.at(k) == entries[i].second.at(k));
  }

  // identical bytes when saved again
  const fs::path path2 = dir / "w2.ckpt";
  save_checkpoint(path2, back);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  const std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);

  CHECK_THROWS_AS((void)load_checkpoint(dir / "missing.ckpt"), FormatError);
  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "WXYZ";
  }
  CHECK_THROWS_AS((void)load_checkpoint(dir / "bad.ckpt"), FormatError);
  fs::remove_all(dir);
}

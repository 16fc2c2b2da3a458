#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "clickseg/annotate.hpp"
#include "clickseg/rng.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

Bitmap filled_square(Index h, Index w, Index y0, Index x0, Index side) {
  Bitmap b(h, w);
  for (Index y = y0; y < y0 + side; ++y)
    for (Index x = x0; x < x0 + side; ++x) b.at(y, x) = 1;
  return b;
}

// Erosion oracle: a pixel survives iff every 3x3 neighbor is set. Border
// pixels always lose a neighbor to the image edge, so only the interior can
// survive.
Bitmap erode_oracle(const Bitmap& in) {
  Bitmap out(in.h, in.w);
  for (Index y = 1; y + 1 < in.h; ++y)
    for (Index x = 1; x + 1 < in.w; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) all = all && in.at(y + dy, x + dx);
      out.at(y, x) = all ? 1 : 0;
    }
  return out;
}

}  // namespace

TEST_CASE("erosion basics") {
  SUBCASE("3x3 all-ones erodes to the center pixel") {
    Bitmap b = filled_square(3, 3, 0, 0, 3);
    Bitmap e = erode_mask(b, 1);
    CHECK(e.count() == 1);
    CHECK(e.at(1, 1) == 1);
  }
  SUBCASE("empty stays empty; zero iterations is the identity") {
    Bitmap empty(4, 4);
    CHECK(erode_mask(empty, 3).count() == 0);
    Bitmap b = filled_square(6, 6, 1, 1, 4);
    CHECK(erode_mask(b, 0).data == b.data);
  }
  SUBCASE("erosion is monotone and matches the brute-force definition") {
    Rng rng(31);
    Bitmap b(12, 12);
    for (auto& v : b.data) v = rng.below(2) ? 1 : 0;
    Bitmap prev = b;
    for (int k = 1; k <= 3; ++k) {
      Bitmap ours = erode_mask(b, k);
      Bitmap oracle = erode_oracle(prev);
      CHECK(ours.data == oracle.data);
      // containment in the previous level
      for (std::size_t i = 0; i < ours.data.size(); ++i)
        if (ours.data[i]) CHECK(prev.data[i]);
      prev = std::move(oracle);
    }
  }
}

TEST_CASE("sample_point is uniform, deterministic, and member of the mask") {
  Bitmap two(1, 3);
  two.at(0, 0) = 1;
  two.at(0, 2) = 1;

  SUBCASE("single pixel always returned") {
    Bitmap one(3, 3);
    one.at(2, 1) = 1;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      Point p = sample_point(one, rng);
      CHECK(p.x == 1);
      CHECK(p.y == 2);
    }
  }
  SUBCASE("fixed seed reproduces the draw") {
    Rng a(77), b(77);
    Point pa = sample_point(two, a);
    Point pb = sample_point(two, b);
    CHECK(pa.x == pb.x);
    CHECK(pa.y == pb.y);
  }
  SUBCASE("10^4 draws over a 2-pixel mask stay near 50/50") {
    Rng rng(99);
    int left = 0;
    for (int i = 0; i < 10000; ++i) left += sample_point(two, rng).x == 0;
    CHECK(left >= 4500);
    CHECK(left <= 5500);
  }
  SUBCASE("empty region is an error") {
    Bitmap empty(2, 2);
    Rng rng(1);
    CHECK_THROWS_AS((void)sample_point(empty, rng), ShapeError);
  }
}

TEST_CASE("first-frame annotation honors erosion depth and fallbacks") {
  SUBCASE("20x20 square object erodes twice; the point lies in the 16x16 interior") {
    Mask mask(32, 32);
    for (Index y = 4; y < 24; ++y)
      for (Index x = 4; x < 24; ++x) mask.at(y, x) = 1;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      PointSet ps = annotate_first_frame(mask, seed);
      const Point* p = ps.find(1);
      REQUIRE(p != nullptr);
      CHECK(p->x >= 6);
      CHECK(p->x <= 21);
      CHECK(p->y >= 6);
      CHECK(p->y <= 21);
      const Point* bg = ps.find(0);
      REQUIRE(bg != nullptr);
      CHECK(mask.at(bg->y, bg->x) == 0);
    }
  }
  SUBCASE("single-pixel object forces the fallback to its only pixel") {
    Mask mask(8, 8);
    mask.at(3, 5) = 1;
    PointSet ps = annotate_first_frame(mask, 123);
    const Point* p = ps.find(1);
    REQUIRE(p != nullptr);
    CHECK(p->x == 5);
    CHECK(p->y == 3);
  }
  SUBCASE("two objects yield exactly ids 0, 1, 2 inside their regions") {
    Mask mask(16, 16);
    for (Index y = 2; y < 7; ++y)
      for (Index x = 2; x < 7; ++x) mask.at(y, x) = 1;
    for (Index y = 9; y < 14; ++y)
      for (Index x = 9; x < 14; ++x) mask.at(y, x) = 2;
    PointSet ps = annotate_first_frame(mask, 7);
    REQUIRE(ps.points.size() == 3);
    for (int id = 0; id <= 2; ++id) {
      const Point* p = ps.find(id);
      REQUIRE(p != nullptr);
      CHECK(mask.at(p->y, p->x) == id);
    }
  }
  SUBCASE("mask without objects is rejected") {
    Mask empty(4, 4);
    CHECK_THROWS_AS((void)annotate_first_frame(empty, 1), ShapeError);
  }
}

TEST_CASE("points file round-trip and validation") {
  const fs::path dir = fs::temp_directory_path() / "clickseg_test_points";
  fs::remove_all(dir);
  fs::create_directories(dir);

  Mask mask(8, 8);
  mask.at(2, 2) = 1;
  mask.at(5, 5) = 2;
  PointSet ps;
  ps.points = {Point{0, 0, 0}, Point{1, 2, 2}, Point{2, 5, 5}};
  const fs::path path = dir / "points.json";
  save_points(path, ps);

  PointSet back = load_points(path, 8, 8, &mask);
  REQUIRE(back.points.size() == 3);
  CHECK(back.points[0].id == 0);
  CHECK(back.points[1].id == 1);
  CHECK(back.points[2].id == 2);
  CHECK(back.points[1].x == 2);
  CHECK(back.points[2].y == 5);

  SUBCASE("duplicate object id is rejected") {
    std::ofstream out(dir / "dup.json");
    out << R"({"background":{"x":0,"y":0},"objects":[)"
        << R"({"id":1,"x":2,"y":2},{"id":1,"x":3,"y":3}]})";
    out.close();
    CHECK_THROWS_AS((void)load_points(dir / "dup.json"), FormatError);
  }
  SUBCASE("missing background is rejected") {
    std::ofstream out(dir / "nobg.json");
    out << R"({"objects":[{"id":1,"x":2,"y":2}]})";
    out.close();
    CHECK_THROWS_AS((void)load_points(dir / "nobg.json"), FormatError);
  }
  SUBCASE("coordinate (W, 0) is out of range") {
    std::ofstream out(dir / "oob.json");
    out << R"({"background":{"x":8,"y":0},"objects":[{"id":1,"x":2,"y":2}]})";
    out.close();
    CHECK_THROWS_AS((void)load_points(dir / "oob.json", 8, 8), FormatError);
  }
  SUBCASE("membership is validated against a supplied mask") {
    std::ofstream out(dir / "wrong.json");
    out << R"({"background":{"x":0,"y":0},"objects":[{"id":1,"x":5,"y":5}]})";
    out.close();
    // (5,5) belongs to object 2, not 1
    CHECK_THROWS_AS((void)load_points(dir / "wrong.json", 0, 0, &mask), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("mask corruption changes object area by roughly the requested strength") {
  Mask mask(32, 32);
  for (Index y = 8; y < 24; ++y)
    for (Index x = 8; x < 24; ++x) mask.at(y, x) = 1;
  const Index base = mask_region(mask, 1).count();

  Rng rng(55);
  int changed = 0;
  for (int i = 0; i < 10; ++i) {
    Mask corrupted = corrupt_mask(mask, 0.3, rng);
    const Index area = mask_region(corrupted, 1).count();
    if (area != base) ++changed;
    const double rel =
        std::abs(static_cast<double>(area - base)) / static_cast<double>(base);
    CHECK(rel >= 0.2);
    CHECK(rel <= 0.8);
  }
  CHECK(changed == 10);
}

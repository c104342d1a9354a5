#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "anatgraph/error.hpp"
#include "anatgraph/rng.hpp"
#include "anatgraph/transform.hpp"

using namespace anatgraph;

namespace {

// Smooth random field on a 9^3 grid at 4 mm (1 mm voxels), max magnitude `amp`.
DisplacementField smooth_field(std::uint64_t seed, double amp) {
  RngStream r(seed, "field");
  DisplacementField f(9, 9, 9, 4.0f);
  const double ax = r.uniform(-1, 1), ay = r.uniform(-1, 1), az = r.uniform(-1, 1);
  const double ph = r.uniform(0, 6.28);
  for (std::size_t z = 0; z < 9; ++z) {
    for (std::size_t y = 0; y < 9; ++y) {
      for (std::size_t x = 0; x < 9; ++x) {
        const Vec3 p = f.node_position(z, y, x);
        const double s = std::sin(0.08 * p.x + 0.06 * p.y + ph) * std::cos(0.07 * p.z);
        f.set_node(z, y, x, {amp * ax * s / std::sqrt(3.0), amp * ay * s / std::sqrt(3.0),
                             amp * az * s / std::sqrt(3.0)});
      }
    }
  }
  return f;
}

SpatialTransform random_affine(std::uint64_t seed) {
  RngStream r(seed, "affine");
  SpatialTransform t;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) t.linear(i, j) = (i == j ? 1.0 : 0.0) + r.uniform(-0.05, 0.05);
  }
  t.translation = {r.uniform(-2, 2), r.uniform(-2, 2), r.uniform(-2, 2)};
  return t;
}

std::vector<Vec3> random_points(std::uint64_t seed, std::size_t n, double lo, double hi) {
  RngStream r(seed, "points");
  std::vector<Vec3> pts(n);
  for (Vec3& p : pts) p = {r.uniform(lo, hi), r.uniform(lo, hi), r.uniform(lo, hi)};
  return pts;
}

}  // namespace

TEST_SUITE("transform") {
  TEST_CASE("identity inverts to identity") {
    const SpatialTransform inv = invert(SpatialTransform::identity());
    const Vec3 p{1.5, -2.0, 7.0};
    CHECK(inv.apply(p) == p);
  }

  TEST_CASE("translation inverts to the opposite translation") {
    const SpatialTransform inv = invert(SpatialTransform::translation_by({5, -1, 2}));
    const Vec3 q = inv.apply({0, 0, 0});
    CHECK(q.x == doctest::Approx(-5));
    CHECK(q.y == doctest::Approx(1));
    CHECK(q.z == doctest::Approx(-2));
  }

  TEST_CASE("inverse flips direction") {
    SpatialTransform t;
    t.direction = Direction::SubjectToAtlas;
    CHECK(invert(t).direction == Direction::AtlasToSubject);
  }

  TEST_CASE("singular affine is rejected") {
    SpatialTransform t;
    t.linear = Mat3{{1, 0, 0, 0, 1, 0, 0, 0, 0}};
    CHECK_THROWS_AS(invert(t), ConfigError);
  }

  TEST_CASE("affine plus displacement round trips within half a voxel") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SpatialTransform t = random_affine(seed);
      t.displacement = smooth_field(seed, 2.0);
      CHECK(t.displacement->max_magnitude() <= 2.0 + 1e-6);
      const SpatialTransform inv = invert(t);
      const auto pts = random_points(seed, 1000, 6.0, 26.0);
      CHECK(max_round_trip_error(t, inv, pts) < 0.5);
    }
  }

  TEST_CASE("exhausting the iteration budget names the residual") {
    SpatialTransform t;
    t.displacement = smooth_field(1, 2.0);
    InvertOptions opts;
    opts.max_iterations = 1;
    try {
      invert(t, opts);
      FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
      CHECK(std::string(e.what()).find("residual") != std::string::npos);
    }
  }

  TEST_CASE("RTFM round trip") {
    SpatialTransform t = random_affine(3);
    t.displacement = smooth_field(3, 1.0);
    t.composition = Composition::AffineFirst;
    t.direction = Direction::AtlasToSubject;
    std::stringstream ss;
    write_rtfm(t, ss);
    CHECK(ss.str().substr(0, 4) == "RTFM");
    const SpatialTransform back = read_rtfm(ss);
    CHECK(back.composition == Composition::AffineFirst);
    CHECK(back.direction == Direction::AtlasToSubject);
    REQUIRE(back.displacement.has_value());
    CHECK(*back.displacement == *t.displacement);
    for (int i = 0; i < 9; ++i) CHECK(back.linear.m[i] == doctest::Approx(t.linear.m[i]).epsilon(1e-7));
    std::stringstream bad("RTFX");
    CHECK_THROWS_AS(read_rtfm(bad), IoError);
  }
}

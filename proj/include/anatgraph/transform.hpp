#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "anatgraph/geometry.hpp"

namespace anatgraph {

// Displacement vectors (mm) on a regular grid with nodes at k * spacing_mm,
// z-major like volumes. Sampling is trilinear with replicated borders.
struct DisplacementField {
  std::size_t nz = 0, ny = 0, nx = 0;
  float spacing_mm = 1.0f;
  std::vector<float> vectors;  // nz*ny*nx*3, (x, y, z) per node

  DisplacementField() = default;
  DisplacementField(std::size_t z, std::size_t y, std::size_t x, float spacing)
      : nz(z), ny(y), nx(x), spacing_mm(spacing), vectors(z * y * x * 3, 0.0f) {}

  std::size_t nodes() const noexcept { return nz * ny * nx; }
  Vec3 node_position(std::size_t z, std::size_t y, std::size_t x) const {
    return {static_cast<double>(x) * spacing_mm, static_cast<double>(y) * spacing_mm,
            static_cast<double>(z) * spacing_mm};
  }
  Vec3 node(std::size_t z, std::size_t y, std::size_t x) const;
  void set_node(std::size_t z, std::size_t y, std::size_t x, Vec3 v);
  Vec3 sample(Vec3 p) const;
  double max_magnitude() const;

  friend bool operator==(const DisplacementField&, const DisplacementField&) = default;
};

// How the affine (A, b) and the displacement u combine:
//   DisplacementFirst: p -> A (p + u(p)) + b
//   AffineFirst:       p -> y + u(y),  y = A p + b
// Inverting one form yields the other.
enum class Composition { DisplacementFirst, AffineFirst };
enum class Direction { SubjectToAtlas, AtlasToSubject };

struct SpatialTransform {
  Mat3 linear = Mat3::identity();
  Vec3 translation{};
  std::optional<DisplacementField> displacement;
  Composition composition = Composition::DisplacementFirst;
  Direction direction = Direction::SubjectToAtlas;

  static SpatialTransform identity() { return {}; }
  static SpatialTransform translation_by(Vec3 t) {
    SpatialTransform s;
    s.translation = t;
    return s;
  }

  Vec3 apply(Vec3 p) const;
};

struct InvertOptions {
  int max_iterations = 50;
  double tolerance_voxels = 1e-3;
  double voxel_mm = 1.0;
  // The inverse field is sampled on a grid refined until its spacing is at
  // most this many voxels, which bounds interpolation error.
  double max_inverse_spacing_voxels = 2.0;
};

// Exact affine inverse; displacement inverted node-wise by the fixed point
// w(y) = -u(y + w(y)). Throws ConvergenceError naming the worst residual.
// Throws ConfigError for a singular affine.
SpatialTransform invert(const SpatialTransform& t, const InvertOptions& opts = {});

// max_p |forward(inverse(p)) - p| over the given points, in mm.
double max_round_trip_error(const SpatialTransform& forward, const SpatialTransform& inverse,
                            std::span<const Vec3> points);

// RTFM: "RTFM", u32 version = 1, 12 f32 (row-major 3x3 then translation),
// u8 flags (bit0 has displacement, bit1 affine-first, bit2 atlas->subject),
// then if bit0: u32 nz, ny, nx, f32 grid spacing mm, nz*ny*nx*3 f32.
void write_rtfm(const SpatialTransform& t, std::ostream& os);
SpatialTransform read_rtfm(std::istream& is);
void write_rtfm(const SpatialTransform& t, const std::filesystem::path& path);
SpatialTransform read_rtfm(const std::filesystem::path& path);

}  // namespace anatgraph

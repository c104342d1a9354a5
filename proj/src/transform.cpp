#include "anatgraph/transform.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "anatgraph/error.hpp"
#include "binio.hpp"

namespace anatgraph {

namespace {
constexpr std::uint32_t kRtfmVersion = 1;
constexpr std::uint8_t kHasDisplacement = 1u << 0;
constexpr std::uint8_t kAffineFirst = 1u << 1;
constexpr std::uint8_t kAtlasToSubject = 1u << 2;
}  // namespace

Vec3 DisplacementField::node(std::size_t z, std::size_t y, std::size_t x) const {
  const std::size_t i = ((z * ny + y) * nx + x) * 3;
  return {vectors[i], vectors[i + 1], vectors[i + 2]};
}

void DisplacementField::set_node(std::size_t z, std::size_t y, std::size_t x, Vec3 v) {
  const std::size_t i = ((z * ny + y) * nx + x) * 3;
  vectors[i] = static_cast<float>(v.x);
  vectors[i + 1] = static_cast<float>(v.y);
  vectors[i + 2] = static_cast<float>(v.z);
}

Vec3 DisplacementField::sample(Vec3 p) const {
  auto axis = [this](double coord, std::size_t n, std::size_t& i0, double& frac) {
    double g = coord / spacing_mm;
    g = std::clamp(g, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<std::size_t>(g), n > 1 ? n - 2 : 0);
    frac = n > 1 ? g - static_cast<double>(i0) : 0.0;
  };
  std::size_t x0, y0, z0;
  double fx, fy, fz;
  axis(p.x, nx, x0, fx);
  axis(p.y, ny, y0, fy);
  axis(p.z, nz, z0, fz);
  const std::size_t x1 = std::min(x0 + 1, nx - 1), y1 = std::min(y0 + 1, ny - 1),
                    z1 = std::min(z0 + 1, nz - 1);
  Vec3 out{};
  const std::size_t zs[2] = {z0, z1}, ys[2] = {y0, y1}, xs[2] = {x0, x1};
  const double wz[2] = {1.0 - fz, fz}, wy[2] = {1.0 - fy, fy}, wx[2] = {1.0 - fx, fx};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int c = 0; c < 2; ++c) {
        const double w = wz[a] * wy[b] * wx[c];
        if (w == 0.0) continue;
        out = out + w * node(zs[a], ys[b], xs[c]);
      }
    }
  }
  return out;
}

double DisplacementField::max_magnitude() const {
  double mx = 0.0;
  for (std::size_t i = 0; i < nodes(); ++i) {
    const Vec3 v{vectors[i * 3], vectors[i * 3 + 1], vectors[i * 3 + 2]};
    mx = std::max(mx, v.norm());
  }
  return mx;
}

Vec3 SpatialTransform::apply(Vec3 p) const {
  if (composition == Composition::DisplacementFirst) {
    const Vec3 moved = displacement ? p + displacement->sample(p) : p;
    return linear * moved + translation;
  }
  const Vec3 y = linear * p + translation;
  return displacement ? y + displacement->sample(y) : y;
}

SpatialTransform invert(const SpatialTransform& t, const InvertOptions& opts) {
  const double det = t.linear.determinant();
  if (std::abs(det) < 1e-12) throw ConfigError("transform affine part is singular");
  SpatialTransform inv;
  inv.linear = t.linear.inverse();
  inv.translation = -(inv.linear * t.translation);
  inv.composition = t.composition == Composition::DisplacementFirst ? Composition::AffineFirst
                                                                    : Composition::DisplacementFirst;
  inv.direction = t.direction == Direction::SubjectToAtlas ? Direction::AtlasToSubject
                                                           : Direction::SubjectToAtlas;
  if (!t.displacement) return inv;

  const DisplacementField& u = *t.displacement;
  const double max_spacing = opts.max_inverse_spacing_voxels * opts.voxel_mm;
  const std::size_t refine =
      max_spacing > 0.0 ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                                       std::ceil(u.spacing_mm / max_spacing)))
                        : 1;
  auto fine = [refine](std::size_t n) { return (n - 1) * refine + 1; };
  DisplacementField w(fine(u.nz), fine(u.ny), fine(u.nx),
                      static_cast<float>(u.spacing_mm / static_cast<double>(refine)));
  const double tol = opts.tolerance_voxels * opts.voxel_mm;
  double worst = 0.0;
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    DisplacementField next = w;
    for (std::size_t z = 0; z < w.nz; ++z) {
      for (std::size_t y = 0; y < w.ny; ++y) {
        for (std::size_t x = 0; x < w.nx; ++x) {
          const Vec3 pos = w.node_position(z, y, x);
          next.set_node(z, y, x, -u.sample(pos + w.node(z, y, x)));
        }
      }
    }
    w = std::move(next);
    worst = 0.0;
    for (std::size_t z = 0; z < w.nz; ++z) {
      for (std::size_t y = 0; y < w.ny; ++y) {
        for (std::size_t x = 0; x < w.nx; ++x) {
          const Vec3 pos = w.node_position(z, y, x);
          const Vec3 wn = w.node(z, y, x);
          worst = std::max(worst, (wn + u.sample(pos + wn)).norm());
        }
      }
    }
    if (worst < tol) {
      inv.displacement = std::move(w);
      return inv;
    }
  }
  std::ostringstream msg;
  msg << "displacement inversion did not converge in " << opts.max_iterations
      << " iterations; worst residual " << worst / opts.voxel_mm << " voxels";
  throw ConvergenceError(msg.str());
}

double max_round_trip_error(const SpatialTransform& forward, const SpatialTransform& inverse,
                            std::span<const Vec3> points) {
  double worst = 0.0;
  for (const Vec3& p : points) worst = std::max(worst, distance(forward.apply(inverse.apply(p)), p));
  return worst;
}

void write_rtfm(const SpatialTransform& t, std::ostream& os) {
  os.write("RTFM", 4);
  binio::put<std::uint32_t>(os, kRtfmVersion);
  for (double v : t.linear.m) binio::put<float>(os, static_cast<float>(v));
  binio::put<float>(os, static_cast<float>(t.translation.x));
  binio::put<float>(os, static_cast<float>(t.translation.y));
  binio::put<float>(os, static_cast<float>(t.translation.z));
  std::uint8_t flags = 0;
  if (t.displacement) flags |= kHasDisplacement;
  if (t.composition == Composition::AffineFirst) flags |= kAffineFirst;
  if (t.direction == Direction::AtlasToSubject) flags |= kAtlasToSubject;
  binio::put<std::uint8_t>(os, flags);
  if (t.displacement) {
    const auto& d = *t.displacement;
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.nz));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.ny));
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.nx));
    binio::put<float>(os, d.spacing_mm);
    binio::put_floats(os, d.vectors.data(), d.vectors.size());
  }
  if (!os) throw IoError("failed writing RTFM stream");
}

SpatialTransform read_rtfm(std::istream& is) {
  binio::expect_magic(is, "RTFM", "RTFM");
  const auto version = binio::get<std::uint32_t>(is, "RTFM version");
  if (version != kRtfmVersion) throw IoError("unsupported RTFM version " + std::to_string(version));
  SpatialTransform t;
  for (double& v : t.linear.m) v = binio::get<float>(is, "RTFM affine");
  t.translation.x = binio::get<float>(is, "RTFM translation");
  t.translation.y = binio::get<float>(is, "RTFM translation");
  t.translation.z = binio::get<float>(is, "RTFM translation");
  const auto flags = binio::get<std::uint8_t>(is, "RTFM flags");
  if (flags & ~(kHasDisplacement | kAffineFirst | kAtlasToSubject)) {
    throw IoError("RTFM flags byte has unknown bits set");
  }
  t.composition = (flags & kAffineFirst) ? Composition::AffineFirst : Composition::DisplacementFirst;
  t.direction = (flags & kAtlasToSubject) ? Direction::AtlasToSubject : Direction::SubjectToAtlas;
  if (flags & kHasDisplacement) {
    const auto nz = binio::get<std::uint32_t>(is, "RTFM grid dims");
    const auto ny = binio::get<std::uint32_t>(is, "RTFM grid dims");
    const auto nx = binio::get<std::uint32_t>(is, "RTFM grid dims");
    const auto spacing = binio::get<float>(is, "RTFM grid spacing");
    if (nz == 0 || ny == 0 || nx == 0 || !(spacing > 0.0f)) {
      throw IoError("RTFM displacement grid has invalid dims or spacing");
    }
    DisplacementField d(nz, ny, nx, spacing);
    binio::get_floats(is, d.vectors.data(), d.vectors.size(), "RTFM displacement");
    t.displacement = std::move(d);
  }
  if (std::abs(t.linear.determinant()) < 1e-12) throw IoError("RTFM affine part is singular");
  return t;
}

void write_rtfm(const SpatialTransform& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_rtfm(t, os);
}

SpatialTransform read_rtfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_rtfm(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace anatgraph

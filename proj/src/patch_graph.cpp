#include "anatgraph/patch_graph.hpp"

#include <algorithm>
#include <cmath>

#include "anatgraph/error.hpp"

namespace anatgraph {

std::array<float, 3> AtlasGrid::normalized_center(std::size_t j) const {
  const Vec3 c = centers.at(j);
  const double ex = static_cast<double>(width) * spacing_mm;
  const double ey = static_cast<double>(height) * spacing_mm;
  const double ez = static_cast<double>(depth) * spacing_mm;
  return {static_cast<float>(2.0 * c.x / ex - 1.0), static_cast<float>(2.0 * c.y / ey - 1.0),
          static_cast<float>(2.0 * c.z / ez - 1.0)};
}

namespace {

std::vector<std::size_t> axis_starts(std::size_t dim, std::size_t patch, std::size_t step) {
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a + patch <= dim; a += step) out.push_back(a);
  return out;
}

bool box_hits_mask(const Volume& mask, std::size_t z0, std::size_t y0, std::size_t x0,
                   std::size_t p) {
  for (std::size_t z = z0; z < z0 + p; ++z) {
    for (std::size_t y = y0; y < y0 + p; ++y) {
      for (std::size_t x = x0; x < x0 + p; ++x) {
        if (mask.at(z, y, x) > 0.5f) return true;
      }
    }
  }
  return false;
}

}  // namespace

AtlasGrid build_atlas_grid(const Volume& atlas, const Volume& mask, std::size_t patch_size,
                           std::size_t step) {
  validate(atlas);
  validate(mask);
  if (mask.depth != atlas.depth || mask.height != atlas.height || mask.width != atlas.width) {
    throw ConfigError("atlas mask dims differ from atlas dims");
  }
  if (patch_size == 0) throw ConfigError("patch size must be >= 1");
  if (patch_size > std::min({atlas.depth, atlas.height, atlas.width})) {
    throw ConfigError("patch size " + std::to_string(patch_size) + " exceeds atlas dims");
  }
  if (step == 0 || step > patch_size) throw ConfigError("step must satisfy 0 < step <= patch size");
  if (std::none_of(mask.voxels.begin(), mask.voxels.end(), [](float v) { return v > 0.5f; })) {
    throw ConfigError("atlas mask is empty");
  }

  AtlasGrid g;
  g.depth = atlas.depth;
  g.height = atlas.height;
  g.width = atlas.width;
  g.spacing_mm = atlas.spacing_mm;
  g.patch_size = patch_size;
  g.step = step;
  const double half = static_cast<double>(patch_size / 2);
  for (std::size_t z : axis_starts(atlas.depth, patch_size, step)) {
    for (std::size_t y : axis_starts(atlas.height, patch_size, step)) {
      for (std::size_t x : axis_starts(atlas.width, patch_size, step)) {
        if (!box_hits_mask(mask, z, y, x, patch_size)) continue;
        g.origins.push_back({z, y, x});
        g.centers.push_back({(static_cast<double>(x) + half) * atlas.spacing_mm,
                             (static_cast<double>(y) + half) * atlas.spacing_mm,
                             (static_cast<double>(z) + half) * atlas.spacing_mm});
      }
    }
  }
  return g;
}

std::vector<Vec3> map_centers(const AtlasGrid& grid, const SpatialTransform& t_inv) {
  std::vector<Vec3> out;
  out.reserve(grid.size());
  for (const Vec3& c : grid.centers) out.push_back(t_inv.apply(c));
  return out;
}

PatchSet extract_patches(const Volume& v, std::span<const Vec3> centers, std::size_t patch_size) {
  PatchSet ps;
  ps.patch_size = patch_size;
  ps.count = centers.size();
  ps.voxels.assign(ps.count * ps.patch_voxels(), kBackgroundIntensity);
  ps.out_of_bounds.assign(ps.count, 0);
  const long p = static_cast<long>(patch_size);
  const long D = static_cast<long>(v.depth), H = static_cast<long>(v.height),
             W = static_cast<long>(v.width);
  for (std::size_t j = 0; j < centers.size(); ++j) {
    const Vec3 c = centers[j];
    if (!std::isfinite(c.x) || !std::isfinite(c.y) || !std::isfinite(c.z)) {
      throw NumericError("extract_patches: non-finite center for node " + std::to_string(j));
    }
    const long x0 = std::lround(c.x / v.spacing_mm) - p / 2;
    const long y0 = std::lround(c.y / v.spacing_mm) - p / 2;
    const long z0 = std::lround(c.z / v.spacing_mm) - p / 2;
    float* dst = ps.voxels.data() + j * ps.patch_voxels();
    bool padded = false;
    for (long dz = 0; dz < p; ++dz) {
      const long z = z0 + dz;
      for (long dy = 0; dy < p; ++dy) {
        const long y = y0 + dy;
        for (long dx = 0; dx < p; ++dx) {
          const long x = x0 + dx;
          if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) {
            padded = true;
            continue;
          }
          dst[(dz * p + dy) * p + dx] = v.at(static_cast<std::size_t>(z),
                                             static_cast<std::size_t>(y),
                                             static_cast<std::size_t>(x));
        }
      }
    }
    ps.out_of_bounds[j] = padded ? 1 : 0;
  }
  return ps;
}

Tensor build_adjacency(std::span<const Vec3> centers, double rho_mm) {
  if (!(rho_mm > 0.0)) throw ConfigError("rho must be > 0");
  const std::size_t n = centers.size();
  if (n == 0) throw ConfigError("cannot build adjacency for an empty graph");
  Tensor a({n, n}, 0.0f);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = j + 1; k < n; ++k) {
      if (distance(centers[j], centers[k]) < rho_mm) {
        a.at(j, k) = 1.0f;
        a.at(k, j) = 1.0f;
      }
    }
  }
  return a;
}

Tensor normalize_adjacency(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw ShapeError("adjacency must be square, got " + shape_string(adjacency.dims()));
  }
  const std::size_t n = adjacency.dim(0);
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t j = 0; j < n; ++j) {
    double deg = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k != j) deg += adjacency.at(j, k);
    }
    inv_sqrt_deg[j] = 1.0 / std::sqrt(deg);
  }
  Tensor out({n, n}, 0.0f);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      const double a = j == k ? 1.0 : adjacency.at(j, k);
      if (a != 0.0) out.at(j, k) = static_cast<float>(a * inv_sqrt_deg[j] * inv_sqrt_deg[k]);
    }
  }
  return out;
}

PatientGraph build_patient_graph(std::string subject_id, const Volume& volume,
                                 std::shared_ptr<const AtlasGrid> grid,
                                 const SpatialTransform& atlas_to_subject, double rho_mm) {
  PatientGraph g;
  g.subject_id = std::move(subject_id);
  g.centers = map_centers(*grid, atlas_to_subject);
  g.patches = extract_patches(volume, g.centers, grid->patch_size);
  g.adjacency = build_adjacency(g.centers, rho_mm);
  g.adjacency_norm = normalize_adjacency(g.adjacency);
  g.rho_mm = rho_mm;
  g.atlas = std::move(grid);
  return g;
}

nlohmann::json graph_to_json(const PatientGraph& g) {
  nlohmann::json centers = nlohmann::json::array();
  for (const Vec3& c : g.centers) centers.push_back({c.x, c.y, c.z});
  nlohmann::json edges = nlohmann::json::array();
  const std::size_t n = g.size();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = j + 1; k < n; ++k) {
      if (g.adjacency.at(j, k) != 0.0f) edges.push_back({j, k});
    }
  }
  return {{"subject_id", g.subject_id},
          {"n", n},
          {"centers_mm", std::move(centers)},
          {"edges", std::move(edges)},
          {"rho_mm", g.rho_mm}};
}

}  // namespace anatgraph

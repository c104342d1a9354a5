#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/geometry.hpp"
#include "anatgraph/tensor.hpp"
#include "anatgraph/transform.hpp"
#include "anatgraph/volume.hpp"

namespace anatgraph {

inline constexpr float kBackgroundIntensity = -1.0f;

// Equally spaced atlas patches that overlap the mask, ordered z, then y,
// then x ascending. Index j names the same anatomical region in every
// subject.
struct AtlasGrid {
  std::size_t depth = 0, height = 0, width = 0;
  float spacing_mm = 1.0f;
  std::size_t patch_size = 0;
  std::size_t step = 0;
  std::vector<Vec3> centers;                          // mm, atlas frame
  std::vector<std::array<std::size_t, 3>> origins;    // first voxel (z, y, x)

  std::size_t size() const noexcept { return centers.size(); }
  double step_mm() const noexcept { return static_cast<double>(step) * spacing_mm; }
  // Center scaled to [-1, 1] per axis by the atlas extent.
  std::array<float, 3> normalized_center(std::size_t j) const;
  // Default edge threshold: 1.1 grid steps, i.e. 6-connectivity on the grid.
  double default_rho_mm() const noexcept { return step_mm() * 1.1; }
};

AtlasGrid build_atlas_grid(const Volume& atlas, const Volume& mask, std::size_t patch_size,
                           std::size_t step);

// p_i^j = t_inv(p^j), order preserved.
std::vector<Vec3> map_centers(const AtlasGrid& grid, const SpatialTransform& t_inv);

// Cubes of side patch_size centred on the rounded centres; voxels outside the
// volume read as the background intensity.
struct PatchSet {
  std::size_t patch_size = 0;
  std::size_t count = 0;
  std::vector<float> voxels;               // count * patch_size^3
  std::vector<std::uint8_t> out_of_bounds; // per patch: any voxel was padded

  std::size_t patch_voxels() const noexcept { return patch_size * patch_size * patch_size; }
  std::span<const float> patch(std::size_t j) const {
    return {voxels.data() + j * patch_voxels(), patch_voxels()};
  }
};

PatchSet extract_patches(const Volume& v, std::span<const Vec3> centers, std::size_t patch_size);

// A[j][k] = 1 iff j != k and |p_j - p_k| < rho. [N x N], symmetric, zero diagonal.
Tensor build_adjacency(std::span<const Vec3> centers, double rho_mm);

// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I.
Tensor normalize_adjacency(const Tensor& adjacency);

struct PatientGraph {
  std::string subject_id;
  std::shared_ptr<const AtlasGrid> atlas;
  std::vector<Vec3> centers;   // subject frame, mm
  PatchSet patches;
  Tensor adjacency;            // binary
  Tensor adjacency_norm;
  double rho_mm = 0.0;

  std::size_t size() const noexcept { return centers.size(); }
};

PatientGraph build_patient_graph(std::string subject_id, const Volume& volume,
                                 std::shared_ptr<const AtlasGrid> grid,
                                 const SpatialTransform& atlas_to_subject, double rho_mm);

// {subject_id, n, centers_mm, edges: [[j, k], ...] with j < k, rho_mm}
nlohmann::json graph_to_json(const PatientGraph& g);

}  // namespace anatgraph

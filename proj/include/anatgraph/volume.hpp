#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "anatgraph/geometry.hpp"

namespace anatgraph {

// Dense scalar field, z slowest / x fastest, isotropic spacing in mm.
// Voxel (z, y, x) sits at physical position (x, y, z) * spacing.
struct Volume {
  std::size_t depth = 0, height = 0, width = 0;
  float spacing_mm = 1.0f;
  std::vector<float> voxels;

  Volume() = default;
  Volume(std::size_t d, std::size_t h, std::size_t w, float spacing, float fill = 0.0f)
      : depth(d), height(h), width(w), spacing_mm(spacing), voxels(d * h * w, fill) {}

  std::size_t size() const noexcept { return voxels.size(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * height + y) * width + x;
  }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }

  Vec3 extent_mm() const {
    return {static_cast<double>(width) * spacing_mm, static_cast<double>(height) * spacing_mm,
            static_cast<double>(depth) * spacing_mm};
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

// Throws ConfigError if dims are zero, spacing is not positive or the voxel
// count disagrees with the dims.
void validate(const Volume& v);

// RVOL: "RVOL", u32 version = 1, u32 D, H, W, f32 spacing_mm, D*H*W f32
// voxels, all little-endian, z-major order.
void write_rvol(const Volume& v, std::ostream& os);
Volume read_rvol(std::istream& is);
void write_rvol(const Volume& v, const std::filesystem::path& path);
Volume read_rvol(const std::filesystem::path& path);

// Clamps to the CT window [-1024, 240] HU and maps it affinely onto [-1, 1].
float hu_to_unit(float hu);
void apply_hu_window(Volume& v);

}  // namespace anatgraph

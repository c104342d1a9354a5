#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/patch_graph.hpp"
#include "anatgraph/transform.hpp"
#include "anatgraph/volume.hpp"

namespace anatgraph {

struct TextureClass {
  double frequency = 0.0;  // cycles per voxel
  double amplitude = 0.0;  // at severity 1
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t dims = 64;
  float spacing_mm = 1.0f;
  std::size_t subjects = 40;
  // Atlas-frame voxel box [lo, hi) as (x, y, z).
  std::array<std::size_t, 3> lesion_lo{16, 16, 16};
  std::array<std::size_t, 3> lesion_hi{48, 48, 64};
  // One entry per class; the class count is its size.
  std::vector<TextureClass> textures{{0.06, 0.08}, {0.2, 0.3}};
  double severity_lo = 0.5;
  double severity_hi = 1.0;
  double scale_range = 0.10;     // +- fraction
  double rotation_deg = 5.0;     // +- about each axis
  double translation_mm = 2.0;   // +- per axis
  double displacement_mm = 2.0;  // max displacement magnitude
  double displacement_spacing_mm = 16.0;
  // Per-subject nuisance: signed power contrast and additive noise.
  double gamma_lo = 0.8;
  double gamma_hi = 1.25;
  double noise_hi = 0.04;  // noise sigma ~ U[0, noise_hi]

  std::size_t classes() const noexcept { return textures.size(); }
  // No deformation, no nuisance, no lesion: every subject equals the atlas.
  SynthConfig& make_static();
};

void validate(const SynthConfig& cfg);
nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& path = "data");
// FNV-1a over the canonical JSON serialization.
std::uint64_t config_hash(const nlohmann::json& canonical);
std::string hash_hex(std::uint64_t h);

struct SubjectRecord {
  std::string id;
  Volume volume;
  SpatialTransform subject_to_atlas;
  int label = 0;
  double severity = 0.0;
};

struct Cohort {
  Volume atlas;
  Volume mask;
  std::vector<SubjectRecord> subjects;
};

// Smooth base pattern: air outside an ellipsoidal body, a darker lung
// ellipsoid (the mask) inside, gentle low-frequency variation throughout.
Volume atlas_volume(const SynthConfig& cfg);
Volume atlas_mask(const SynthConfig& cfg);

Cohort generate_cohort(const SynthConfig& cfg);

// Atlas nodes whose patch lies at least half inside the lesion box.
std::vector<std::size_t> lesion_nodes(const AtlasGrid& grid, const SynthConfig& cfg);

struct GridConfig {
  std::size_t patch_size = 16;
  std::size_t step = 16;
  double rho_mm = 0.0;  // 0: 1.1 grid steps
};

void validate(const GridConfig& cfg);
nlohmann::json to_json(const GridConfig& cfg);
GridConfig grid_config_from_json(const nlohmann::json& j, const std::string& path = "grid");

// Writes atlas.rvol, mask.rvol, one .rvol and .rtfm per subject and
// manifest.json. Returns the manifest.
nlohmann::json write_cohort(const Cohort& cohort, const SynthConfig& cfg, const GridConfig& grid,
                            const std::filesystem::path& dir);

}  // namespace anatgraph

#include "anatgraph/volume.hpp"

#include <algorithm>
#include <fstream>

#include "anatgraph/error.hpp"
#include "binio.hpp"

namespace anatgraph {

namespace {
constexpr std::uint32_t kRvolVersion = 1;
constexpr double kHuLow = -1024.0;
constexpr double kHuHigh = 240.0;
}  // namespace

void validate(const Volume& v) {
  if (v.depth == 0 || v.height == 0 || v.width == 0) throw ConfigError("volume dims must be >= 1");
  if (!(v.spacing_mm > 0.0f)) throw ConfigError("volume spacing must be > 0");
  if (v.voxels.size() != v.depth * v.height * v.width) {
    throw ConfigError("volume voxel count does not match its dims");
  }
}

void write_rvol(const Volume& v, std::ostream& os) {
  validate(v);
  os.write("RVOL", 4);
  binio::put<std::uint32_t>(os, kRvolVersion);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.depth));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.height));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.width));
  binio::put<float>(os, v.spacing_mm);
  binio::put_floats(os, v.voxels.data(), v.voxels.size());
  if (!os) throw IoError("failed writing RVOL stream");
}

Volume read_rvol(std::istream& is) {
  binio::expect_magic(is, "RVOL", "RVOL");
  const auto version = binio::get<std::uint32_t>(is, "RVOL version");
  if (version != kRvolVersion) throw IoError("unsupported RVOL version " + std::to_string(version));
  Volume v;
  v.depth = binio::get<std::uint32_t>(is, "RVOL depth");
  v.height = binio::get<std::uint32_t>(is, "RVOL height");
  v.width = binio::get<std::uint32_t>(is, "RVOL width");
  v.spacing_mm = binio::get<float>(is, "RVOL spacing");
  if (v.depth == 0 || v.height == 0 || v.width == 0 || !(v.spacing_mm > 0.0f)) {
    throw IoError("RVOL header has invalid dims or spacing");
  }
  v.voxels.resize(v.depth * v.height * v.width);
  binio::get_floats(is, v.voxels.data(), v.voxels.size(), "RVOL voxels");
  return v;
}

void write_rvol(const Volume& v, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_rvol(v, os);
}

Volume read_rvol(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_rvol(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

float hu_to_unit(float hu) {
  const double clamped = std::clamp(static_cast<double>(hu), kHuLow, kHuHigh);
  return static_cast<float>(2.0 * (clamped - kHuLow) / (kHuHigh - kHuLow) - 1.0);
}

void apply_hu_window(Volume& v) {
  for (float& x : v.voxels) x = hu_to_unit(x);
}

}  // namespace anatgraph

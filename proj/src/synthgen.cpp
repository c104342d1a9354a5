#include "anatgraph/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "anatgraph/error.hpp"
#include "anatgraph/rng.hpp"

namespace anatgraph {

SynthConfig& SynthConfig::make_static() {
  for (auto& t : textures) t.amplitude = 0.0;
  severity_lo = severity_hi = 0.0;
  scale_range = rotation_deg = translation_mm = displacement_mm = 0.0;
  gamma_lo = gamma_hi = 1.0;
  noise_hi = 0.0;
  return *this;
}

void validate(const SynthConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("data." + field + ": " + why);
  };
  if (c.dims < 8) fail("dims", "must be >= 8");
  if (!(c.spacing_mm > 0.0f)) fail("spacing_mm", "must be > 0");
  if (c.subjects < 1) fail("subjects", "must be >= 1");
  if (c.textures.size() < 2) fail("textures", "at least two classes required");
  for (std::size_t a = 0; a < 3; ++a) {
    if (c.lesion_lo[a] >= c.lesion_hi[a]) fail("lesion_box", "lo must be below hi on every axis");
    if (c.lesion_hi[a] > c.dims) fail("lesion_box", "box must lie inside the atlas");
  }
  for (std::size_t k = 0; k < c.textures.size(); ++k) {
    const auto& t = c.textures[k];
    const std::string f = "textures[" + std::to_string(k) + "]";
    if (!(t.frequency >= 0.0 && t.frequency <= 0.5)) fail(f + ".frequency", "must lie in [0, 0.5]");
    if (!(t.amplitude >= 0.0 && t.amplitude <= 1.0)) fail(f + ".amplitude", "must lie in [0, 1]");
  }
  if (!(c.severity_lo >= 0.0 && c.severity_lo <= c.severity_hi && c.severity_hi <= 1.0)) {
    fail("severity", "need 0 <= severity_lo <= severity_hi <= 1");
  }
  if (!(c.scale_range >= 0.0 && c.scale_range < 0.5)) fail("scale_range", "must lie in [0, 0.5)");
  if (!(c.rotation_deg >= 0.0 && c.rotation_deg <= 45.0)) fail("rotation_deg", "must lie in [0, 45]");
  if (!(c.translation_mm >= 0.0)) fail("translation_mm", "must be >= 0");
  if (!(c.displacement_mm >= 0.0)) fail("displacement_mm", "must be >= 0");
  if (!(c.displacement_spacing_mm > 0.0)) fail("displacement_spacing_mm", "must be > 0");
  if (c.displacement_mm > 0.2 * c.displacement_spacing_mm) {
    fail("displacement_mm", "must not exceed 0.2 x displacement_spacing_mm (invertibility)");
  }
  if (!(c.gamma_lo > 0.0 && c.gamma_lo <= c.gamma_hi)) fail("gamma", "need 0 < gamma_lo <= gamma_hi");
  if (!(c.noise_hi >= 0.0)) fail("noise_hi", "must be >= 0");
}

nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json textures = nlohmann::json::array();
  for (const auto& t : c.textures) textures.push_back({{"frequency", t.frequency}, {"amplitude", t.amplitude}});
  return {{"seed", c.seed},
          {"dims", c.dims},
          {"spacing_mm", c.spacing_mm},
          {"subjects", c.subjects},
          {"lesion_box", {{"lo", c.lesion_lo}, {"hi", c.lesion_hi}}},
          {"textures", textures},
          {"severity_lo", c.severity_lo},
          {"severity_hi", c.severity_hi},
          {"scale_range", c.scale_range},
          {"rotation_deg", c.rotation_deg},
          {"translation_mm", c.translation_mm},
          {"displacement_mm", c.displacement_mm},
          {"displacement_spacing_mm", c.displacement_spacing_mm},
          {"gamma_lo", c.gamma_lo},
          {"gamma_hi", c.gamma_hi},
          {"noise_hi", c.noise_hi}};
}

namespace {

std::array<std::size_t, 3> box_corner(const nlohmann::json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 3) throw ConfigError(where + ": expected [x, y, z]");
  std::array<std::size_t, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (!v[a].is_number_integer() || v[a].get<long long>() < 0) {
      throw ConfigError(where + "[" + std::to_string(a) + "]: expected a non-negative integer");
    }
    out[a] = v[a].get<std::size_t>();
  }
  return out;
}

}  // namespace

SynthConfig synth_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  SynthConfig c;
  for (const auto& [key, value] : j.items()) {
    const std::string where = path + "." + key;
    auto real = [&](double& f) {
      if (!value.is_number()) throw ConfigError(where + ": expected a number");
      f = value.get<double>();
    };
    auto count = [&](std::size_t& f) {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
      f = value.get<std::size_t>();
    };
    if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    } else if (key == "dims") count(c.dims);
    else if (key == "subjects") count(c.subjects);
    else if (key == "spacing_mm") {
      double s = 0.0;
      real(s);
      c.spacing_mm = static_cast<float>(s);
    } else if (key == "lesion_box") {
      if (!value.is_object()) throw ConfigError(where + ": expected {lo, hi}");
      for (const auto& [bk, bv] : value.items()) {
        if (bk == "lo") c.lesion_lo = box_corner(bv, where + ".lo");
        else if (bk == "hi") c.lesion_hi = box_corner(bv, where + ".hi");
        else throw ConfigError(where + "." + bk + ": unknown key");
      }
    } else if (key == "textures") {
      if (!value.is_array()) throw ConfigError(where + ": expected an array");
      c.textures.clear();
      for (std::size_t k = 0; k < value.size(); ++k) {
        const std::string tw = where + "[" + std::to_string(k) + "]";
        if (!value[k].is_object()) throw ConfigError(tw + ": expected {frequency, amplitude}");
        TextureClass t;
        for (const auto& [tk, tv] : value[k].items()) {
          if (!tv.is_number()) throw ConfigError(tw + "." + tk + ": expected a number");
          if (tk == "frequency") t.frequency = tv.get<double>();
          else if (tk == "amplitude") t.amplitude = tv.get<double>();
          else throw ConfigError(tw + "." + tk + ": unknown key");
        }
        c.textures.push_back(t);
      }
    } else if (key == "severity_lo") real(c.severity_lo);
    else if (key == "severity_hi") real(c.severity_hi);
    else if (key == "scale_range") real(c.scale_range);
    else if (key == "rotation_deg") real(c.rotation_deg);
    else if (key == "translation_mm") real(c.translation_mm);
    else if (key == "displacement_mm") real(c.displacement_mm);
    else if (key == "displacement_spacing_mm") real(c.displacement_spacing_mm);
    else if (key == "gamma_lo") real(c.gamma_lo);
    else if (key == "gamma_hi") real(c.gamma_hi);
    else if (key == "noise_hi") real(c.noise_hi);
    else throw ConfigError(where + ": unknown key");
  }
  validate(c);
  return c;
}

std::uint64_t config_hash(const nlohmann::json& canonical) { return fnv1a64(canonical.dump()); }

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct Anatomy {
  Vec3 center;
  Vec3 body_radii;
  Vec3 lung_radii;
  double extent;
};

Anatomy anatomy(const SynthConfig& c) {
  const double e = static_cast<double>(c.dims) * c.spacing_mm;
  return {{e / 2, e / 2, e / 2}, {0.45 * e, 0.40 * e, 0.45 * e}, {0.40 * e, 0.34 * e, 0.42 * e}, e};
}

double ellipsoid(Vec3 p, Vec3 c, Vec3 r) {
  const double dx = (p.x - c.x) / r.x, dy = (p.y - c.y) / r.y, dz = (p.z - c.z) / r.z;
  return dx * dx + dy * dy + dz * dz;
}

bool in_lung(const Anatomy& a, Vec3 p) { return ellipsoid(p, a.center, a.lung_radii) <= 1.0; }

double base_pattern(const Anatomy& a, Vec3 p) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  if (ellipsoid(p, a.center, a.body_radii) > 1.0) return -1.0;
  if (!in_lung(a, p)) return 0.1 + 0.05 * std::cos(two_pi * p.x / a.extent);
  return -0.7 + 0.08 * std::cos(two_pi * p.x / (0.8 * a.extent)) * std::cos(two_pi * p.y / (0.7 * a.extent)) +
         0.05 * std::sin(two_pi * p.z / (0.9 * a.extent));
}

Vec3 voxel_position(std::size_t z, std::size_t y, std::size_t x, float spacing) {
  return {static_cast<double>(x) * spacing, static_cast<double>(y) * spacing,
          static_cast<double>(z) * spacing};
}

Mat3 rotation(double ax, double ay, double az) {
  Mat3 rx, ry, rz;
  rx.m = {1, 0, 0, 0, std::cos(ax), -std::sin(ax), 0, std::sin(ax), std::cos(ax)};
  ry.m = {std::cos(ay), 0, std::sin(ay), 0, 1, 0, -std::sin(ay), 0, std::cos(ay)};
  rz.m = {std::cos(az), -std::sin(az), 0, std::sin(az), std::cos(az), 0, 0, 0, 1};
  return rz * ry * rx;
}

SpatialTransform random_transform(const SynthConfig& c, const Anatomy& a, RngStream& rng) {
  const double deg = std::numbers::pi / 180.0;
  const double r = c.rotation_deg * deg;
  const Mat3 rot = rotation(rng.uniform(-r, r), rng.uniform(-r, r), rng.uniform(-r, r));
  Mat3 scale;
  scale.m = {1 + rng.uniform(-c.scale_range, c.scale_range), 0, 0, 0,
             1 + rng.uniform(-c.scale_range, c.scale_range), 0, 0, 0,
             1 + rng.uniform(-c.scale_range, c.scale_range)};
  const Vec3 shift{rng.uniform(-c.translation_mm, c.translation_mm),
                   rng.uniform(-c.translation_mm, c.translation_mm),
                   rng.uniform(-c.translation_mm, c.translation_mm)};
  SpatialTransform t;
  if (c.scale_range > 0.0 || c.rotation_deg > 0.0) t.linear = rot * scale;
  // Rotate and scale about the volume centre.
  t.translation = a.center - t.linear * a.center + shift;
  if (c.displacement_mm > 0.0) {
    const std::size_t n =
        static_cast<std::size_t>(std::ceil(a.extent / c.displacement_spacing_mm)) + 1;
    DisplacementField d(n, n, n, static_cast<float>(c.displacement_spacing_mm));
    for (float& v : d.vectors) v = static_cast<float>(rng.normal());
    const double mx = d.max_magnitude();
    if (mx > 0.0) {
      for (float& v : d.vectors) v = static_cast<float>(v * c.displacement_mm / mx);
    }
    t.displacement = std::move(d);
  }
  return t;
}

struct Texture {
  std::array<Vec3, 3> direction;
  std::array<double, 3> frequency;
  std::array<double, 3> phase;

  double operator()(Vec3 q_vox) const {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const Vec3 d = direction[k];
      s += std::sin(2.0 * std::numbers::pi * frequency[k] * (d.x * q_vox.x + d.y * q_vox.y + d.z * q_vox.z) +
                    phase[k]);
    }
    return s / std::sqrt(3.0);
  }
};

Texture random_texture(double base_frequency, RngStream& rng) {
  Texture t;
  for (std::size_t k = 0; k < 3; ++k) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    const double n = d.norm();
    t.direction[k] = n > 0.0 ? (1.0 / n) * d : Vec3{1, 0, 0};
    t.frequency[k] = base_frequency * rng.uniform(0.8, 1.2);
    t.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return t;
}

bool in_box(const SynthConfig& c, Vec3 p) {
  const double s = c.spacing_mm;
  const double v[3] = {p.x, p.y, p.z};
  for (std::size_t a = 0; a < 3; ++a) {
    if (v[a] < static_cast<double>(c.lesion_lo[a]) * s || v[a] >= static_cast<double>(c.lesion_hi[a]) * s) {
      return false;
    }
  }
  return true;
}

}  // namespace

Volume atlas_volume(const SynthConfig& c) {
  const Anatomy a = anatomy(c);
  Volume v(c.dims, c.dims, c.dims, c.spacing_mm);
  for (std::size_t z = 0; z < c.dims; ++z) {
    for (std::size_t y = 0; y < c.dims; ++y) {
      for (std::size_t x = 0; x < c.dims; ++x) {
        v.at(z, y, x) = static_cast<float>(base_pattern(a, voxel_position(z, y, x, c.spacing_mm)));
      }
    }
  }
  return v;
}

Volume atlas_mask(const SynthConfig& c) {
  const Anatomy a = anatomy(c);
  Volume v(c.dims, c.dims, c.dims, c.spacing_mm);
  for (std::size_t z = 0; z < c.dims; ++z) {
    for (std::size_t y = 0; y < c.dims; ++y) {
      for (std::size_t x = 0; x < c.dims; ++x) {
        v.at(z, y, x) = in_lung(a, voxel_position(z, y, x, c.spacing_mm)) ? 1.0f : 0.0f;
      }
    }
  }
  return v;
}

Cohort generate_cohort(const SynthConfig& c) {
  validate(c);
  const Anatomy a = anatomy(c);
  Cohort cohort;
  cohort.atlas = atlas_volume(c);
  cohort.mask = atlas_mask(c);
  const std::size_t width = std::max<std::size_t>(3, std::to_string(c.subjects - 1).size());
  for (std::size_t i = 0; i < c.subjects; ++i) {
    RngStream rng(c.seed, "synth/" + std::to_string(i));
    SubjectRecord r;
    std::string num = std::to_string(i);
    r.id = "subject_" + std::string(width - std::min(width, num.size()), '0') + num;
    r.label = static_cast<int>(i % c.classes());
    r.severity = rng.uniform(c.severity_lo, c.severity_hi);
    r.subject_to_atlas = random_transform(c, a, rng);
    const TextureClass& tc = c.textures[static_cast<std::size_t>(r.label)];
    const Texture texture = random_texture(tc.frequency, rng);
    const double amp = tc.amplitude * r.severity;
    const double gamma = rng.uniform(c.gamma_lo, c.gamma_hi);
    const double noise_sigma = rng.uniform(0.0, c.noise_hi);
    RngStream noise = rng.child("noise");

    Volume& v = r.volume;
    v = Volume(c.dims, c.dims, c.dims, c.spacing_mm);
    for (std::size_t z = 0; z < c.dims; ++z) {
      for (std::size_t y = 0; y < c.dims; ++y) {
        for (std::size_t x = 0; x < c.dims; ++x) {
          const Vec3 q = voxel_position(z, y, x, c.spacing_mm);
          const Vec3 p = r.subject_to_atlas.apply(q);
          double val = base_pattern(a, p);
          if (amp > 0.0 && in_box(c, p) && in_lung(a, p)) {
            val += amp * texture({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
          }
          val = std::clamp(val, -1.0, 1.0);
          if (gamma != 1.0) val = std::copysign(std::pow(std::abs(val), gamma), val);
          if (noise_sigma > 0.0) val = std::clamp(val + noise.normal(0.0, noise_sigma), -1.0, 1.0);
          v.at(z, y, x) = static_cast<float>(val);
        }
      }
    }
    cohort.subjects.push_back(std::move(r));
  }
  return cohort;
}

std::vector<std::size_t> lesion_nodes(const AtlasGrid& grid, const SynthConfig& c) {
  std::vector<std::size_t> out;
  const std::size_t p = grid.patch_size;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const auto& o = grid.origins[j];  // (z, y, x)
    const std::size_t lo[3] = {o[2], o[1], o[0]};
    std::size_t overlap = 1;
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t b0 = std::max(lo[a], c.lesion_lo[a]);
      const std::size_t b1 = std::min(lo[a] + p, c.lesion_hi[a]);
      overlap *= b1 > b0 ? b1 - b0 : 0;
    }
    if (2 * overlap >= p * p * p) out.push_back(j);
  }
  return out;
}

void validate(const GridConfig& g) {
  if (g.patch_size < 1) throw ConfigError("grid.patch_size: must be >= 1");
  if (g.step < 1 || g.step > g.patch_size) throw ConfigError("grid.step: must satisfy 0 < step <= patch_size");
  if (!(g.rho_mm >= 0.0)) throw ConfigError("grid.rho_mm: must be >= 0 (0 selects the default)");
}

nlohmann::json to_json(const GridConfig& g) {
  return {{"patch_size", g.patch_size}, {"step", g.step}, {"rho_mm", g.rho_mm}};
}

GridConfig grid_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  GridConfig g;
  for (const auto& [key, value] : j.items()) {
    const std::string where = path + "." + key;
    if (key == "patch_size" || key == "step") {
      if (!value.is_number_integer() || value.get<long long>() < 1) {
        throw ConfigError(where + ": expected a positive integer");
      }
      (key == "step" ? g.step : g.patch_size) = value.get<std::size_t>();
    } else if (key == "rho_mm") {
      if (!value.is_number()) throw ConfigError(where + ": expected a number");
      g.rho_mm = value.get<double>();
    } else {
      throw ConfigError(where + ": unknown key");
    }
  }
  validate(g);
  return g;
}

nlohmann::json write_cohort(const Cohort& cohort, const SynthConfig& cfg, const GridConfig& grid,
                            const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_rvol(cohort.atlas, dir / "atlas.rvol");
  write_rvol(cohort.mask, dir / "mask.rvol");
  const AtlasGrid g = build_atlas_grid(cohort.atlas, cohort.mask, grid.patch_size, grid.step);
  const std::vector<std::size_t> lesion = lesion_nodes(g, cfg);

  const nlohmann::json config = {{"data", to_json(cfg)}, {"grid", to_json(grid)}};
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : cohort.subjects) {
    const std::string vol = s.id + ".rvol", tfm = s.id + ".rtfm";
    write_rvol(s.volume, dir / vol);
    write_rtfm(s.subject_to_atlas, dir / tfm);
    subjects.push_back({{"id", s.id},
                        {"volume", vol},
                        {"transform", tfm},
                        {"label", s.label},
                        {"severity", s.severity},
                        {"lesion_nodes", lesion}});
  }
  nlohmann::json manifest = {{"version", 1},
                             {"seed", cfg.seed},
                             {"config", config},
                             {"config_hash", hash_hex(config_hash(config))},
                             {"atlas", "atlas.rvol"},
                             {"mask", "mask.rvol"},
                             {"subjects", std::move(subjects)}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot open " + (dir / "manifest.json").string() + " for writing");
  os << manifest.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + (dir / "manifest.json").string());
  return manifest;
}

}  // namespace anatgraph

#include "anatgraph/augment.hpp"

#include <algorithm>
#include <cmath>

#include "anatgraph/error.hpp"

namespace anatgraph {

void validate(const AugmentConfig& c) {
  auto fail = [](const char* field, const char* why) {
    throw ConfigError(std::string("augment.") + field + ": " + why);
  };
  if (!(c.elastic_grid_spacing > 0.0)) fail("elastic_grid_spacing", "must be > 0");
  if (!(c.elastic_sigma >= 0.0)) fail("elastic_sigma", "must be >= 0");
  if (!(c.noise_sigma >= 0.0)) fail("noise_sigma", "must be >= 0");
  if (!(c.gamma_lo > 0.0)) fail("gamma_lo", "must be > 0");
  if (!(c.gamma_lo <= c.gamma_hi)) fail("gamma_hi", "must be >= gamma_lo");
  for (auto [name, p] : {std::pair{"elastic_probability", c.elastic_probability},
                         std::pair{"noise_probability", c.noise_probability},
                         std::pair{"contrast_probability", c.contrast_probability}}) {
    if (!(p >= 0.0 && p <= 1.0)) fail(name, "must lie in [0, 1]");
  }
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"elastic_grid_spacing", c.elastic_grid_spacing},
          {"elastic_sigma", c.elastic_sigma},
          {"noise_sigma", c.noise_sigma},
          {"gamma_lo", c.gamma_lo},
          {"gamma_hi", c.gamma_hi},
          {"elastic_probability", c.elastic_probability},
          {"noise_probability", c.noise_probability},
          {"contrast_probability", c.contrast_probability}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  AugmentConfig c;
  for (const auto& [key, value] : j.items()) {
    double* field = nullptr;
    if (key == "elastic_grid_spacing") field = &c.elastic_grid_spacing;
    else if (key == "elastic_sigma") field = &c.elastic_sigma;
    else if (key == "noise_sigma") field = &c.noise_sigma;
    else if (key == "gamma_lo") field = &c.gamma_lo;
    else if (key == "gamma_hi") field = &c.gamma_hi;
    else if (key == "elastic_probability") field = &c.elastic_probability;
    else if (key == "noise_probability") field = &c.noise_probability;
    else if (key == "contrast_probability") field = &c.contrast_probability;
    else throw ConfigError(path + "." + key + ": unknown key");
    if (!value.is_number()) throw ConfigError(path + "." + key + ": expected a number");
    *field = value.get<double>();
  }
  validate(c);
  return c;
}

namespace {

// Linear interpolation weights of each voxel against a control lattice.
struct AxisWeights {
  std::vector<std::size_t> lo;
  std::vector<double> frac;
};

AxisWeights lattice_weights(std::size_t size, double spacing, std::size_t controls) {
  AxisWeights w;
  w.lo.resize(size);
  w.frac.resize(size);
  for (std::size_t i = 0; i < size; ++i) {
    const double g = static_cast<double>(i) / spacing;
    std::size_t l = std::min(static_cast<std::size_t>(g), controls - 2);
    w.lo[i] = l;
    w.frac[i] = g - static_cast<double>(l);
  }
  return w;
}

float sample_clamped(const std::vector<float>& src, std::size_t n, double z, double y, double x) {
  const double hi = static_cast<double>(n - 1);
  z = std::clamp(z, 0.0, hi);
  y = std::clamp(y, 0.0, hi);
  x = std::clamp(x, 0.0, hi);
  const std::size_t z0 = std::min(static_cast<std::size_t>(z), n - 1);
  const std::size_t y0 = std::min(static_cast<std::size_t>(y), n - 1);
  const std::size_t x0 = std::min(static_cast<std::size_t>(x), n - 1);
  const std::size_t z1 = std::min(z0 + 1, n - 1), y1 = std::min(y0 + 1, n - 1),
                    x1 = std::min(x0 + 1, n - 1);
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  auto at = [&](std::size_t a, std::size_t b, std::size_t c) {
    return static_cast<double>(src[(a * n + b) * n + c]);
  };
  const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
  const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
  const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
  const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
  const double c0 = c00 * (1 - fy) + c01 * fy;
  const double c1 = c10 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

std::vector<float> elastic_warp(const std::vector<float>& src, std::size_t n,
                                const AugmentConfig& cfg, RngStream& rng) {
  const double spacing = cfg.elastic_grid_spacing;
  const std::size_t controls =
      std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil((n - 1) / spacing)) + 1);
  const std::size_t nc3 = controls * controls * controls;
  std::vector<double> disp(nc3 * 3);
  for (double& d : disp) d = rng.normal(0.0, cfg.elastic_sigma);
  const AxisWeights w = lattice_weights(n, spacing, controls);
  auto ctrl = [&](std::size_t a, std::size_t b, std::size_t c, int axis) {
    return disp[((a * controls + b) * controls + c) * 3 + static_cast<std::size_t>(axis)];
  };
  std::vector<float> out(src.size());
  for (std::size_t z = 0; z < n; ++z) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        double d[3] = {0.0, 0.0, 0.0};
        for (int a = 0; a < 2; ++a) {
          const double wz = a ? w.frac[z] : 1.0 - w.frac[z];
          for (int b = 0; b < 2; ++b) {
            const double wy = b ? w.frac[y] : 1.0 - w.frac[y];
            for (int c = 0; c < 2; ++c) {
              const double wx = c ? w.frac[x] : 1.0 - w.frac[x];
              const double wt = wz * wy * wx;
              for (int axis = 0; axis < 3; ++axis) {
                d[axis] += wt * ctrl(w.lo[z] + a, w.lo[y] + b, w.lo[x] + c, axis);
              }
            }
          }
        }
        // displacement components are (x, y, z)
        out[(z * n + y) * n + x] = sample_clamped(src, n, static_cast<double>(z) + d[2],
                                                  static_cast<double>(y) + d[1],
                                                  static_cast<double>(x) + d[0]);
      }
    }
  }
  return out;
}

}  // namespace

std::vector<float> augment(std::span<const float> patch, std::size_t size, const AugmentConfig& cfg,
                           RngStream& rng) {
  if (patch.size() != size * size * size) {
    throw ShapeError("augment: patch has " + std::to_string(patch.size()) +
                     " voxels, expected a cube of side " + std::to_string(size));
  }
  std::vector<float> out(patch.begin(), patch.end());

  const bool do_elastic = rng.uniform() < cfg.elastic_probability;
  if (do_elastic && cfg.elastic_sigma > 0.0 && size > 1) out = elastic_warp(out, size, cfg, rng);

  const bool do_noise = rng.uniform() < cfg.noise_probability;
  if (do_noise && cfg.noise_sigma > 0.0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_sigma));
    for (float& v : out) v += noise(rng.engine());
  }

  const bool do_contrast = rng.uniform() < cfg.contrast_probability;
  if (do_contrast) {
    const double gamma = cfg.gamma_lo == cfg.gamma_hi ? cfg.gamma_lo
                                                       : rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
    if (gamma != 1.0) {
      for (float& v : out) {
        const double a = std::pow(std::abs(static_cast<double>(v)), gamma);
        v = static_cast<float>(v < 0.0f ? -a : a);
      }
    }
  }

  for (float& v : out) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

}  // namespace anatgraph

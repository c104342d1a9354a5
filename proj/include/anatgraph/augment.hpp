#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/rng.hpp"

namespace anatgraph {

struct AugmentConfig {
  double elastic_grid_spacing = 8.0;  // voxels between control points
  double elastic_sigma = 2.0;         // std of control-point displacement, voxels
  double noise_sigma = 0.05;          // additive Gaussian noise, intensity units
  double gamma_lo = 0.8;
  double gamma_hi = 1.25;
  double elastic_probability = 1.0;
  double noise_probability = 1.0;
  double contrast_probability = 1.0;

  // Configuration that leaves every patch unchanged.
  static AugmentConfig identity() {
    AugmentConfig c;
    c.elastic_sigma = 0.0;
    c.noise_sigma = 0.0;
    c.gamma_lo = c.gamma_hi = 1.0;
    return c;
  }
};

// Throws ConfigError naming the offending field.
void validate(const AugmentConfig& cfg);

nlohmann::json to_json(const AugmentConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
AugmentConfig augment_config_from_json(const nlohmann::json& j, const std::string& path = "augment");

// Elastic warp, then additive noise, then signed power-law contrast; the
// result is clamped to [-1, 1]. `patch` is a cube of side `size`.
std::vector<float> augment(std::span<const float> patch, std::size_t size, const AugmentConfig& cfg,
                           RngStream& rng);

}  // namespace anatgraph

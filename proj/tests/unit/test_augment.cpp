#include <doctest.h>

#include <cmath>
#include <vector>

#include "anatgraph/augment.hpp"
#include "anatgraph/error.hpp"

using namespace anatgraph;

namespace {

std::vector<float> random_patch(std::size_t s, std::uint64_t seed) {
  RngStream r(seed, "patch");
  std::vector<float> p(s * s * s);
  for (float& v : p) v = static_cast<float>(r.uniform(-0.6, 0.6));
  return p;
}

}  // namespace

TEST_SUITE("augment") {
  TEST_CASE("identity configuration leaves the patch unchanged") {
    const auto p = random_patch(8, 1);
    RngStream r(1, "aug");
    CHECK(augment(p, 8, AugmentConfig::identity(), r) == p);
  }

  TEST_CASE("noise only has the expected mean absolute change") {
    AugmentConfig cfg = AugmentConfig::identity();
    cfg.noise_sigma = 0.05;
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto p = random_patch(32, seed);
      RngStream r(seed, "noise");
      const auto q = augment(p, 32, cfg, r);
      for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(q[i] - p[i]);
      count += p.size();
    }
    const double mad = total / static_cast<double>(count);
    CHECK(mad >= 0.03);
    CHECK(mad <= 0.05);
  }

  TEST_CASE("same stream gives identical output, distinct tags differ") {
    const auto p = random_patch(16, 2);
    const AugmentConfig cfg;
    RngStream a(5, "view/0");
    RngStream b(5, "view/0");
    RngStream c(5, "view/1");
    const auto qa = augment(p, 16, cfg, a);
    CHECK(qa == augment(p, 16, cfg, b));
    CHECK(qa != augment(p, 16, cfg, c));
  }

  TEST_CASE("outputs stay in [-1, 1]") {
    AugmentConfig cfg;
    cfg.noise_sigma = 0.5;
    cfg.gamma_lo = 0.3;
    cfg.gamma_hi = 3.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::vector<float> p = random_patch(8, seed);
      for (std::size_t i = 0; i < p.size(); i += 7) p[i] = (i % 2) ? 1.0f : -1.0f;
      RngStream r(seed, "range");
      for (float v : augment(p, 8, cfg, r)) CHECK((v >= -1.0f && v <= 1.0f));
    }
  }

  TEST_CASE("config validation and json") {
    AugmentConfig bad;
    bad.gamma_lo = 2.0;
    bad.gamma_hi = 1.0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = AugmentConfig{};
    bad.noise_sigma = -0.1;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    const AugmentConfig back = augment_config_from_json(to_json(AugmentConfig{}));
    CHECK(back.elastic_sigma == 2.0);
    CHECK_THROWS_AS(augment_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  }
}

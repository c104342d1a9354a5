#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace anatgraph {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 14695981039346656037ull);
std::uint64_t splitmix64(std::uint64_t x);

// A deterministic random stream named by (root seed, tag). Two streams with
// different tags are statistically independent; the same (seed, tag) always
// replays the same sequence regardless of when or where it is created.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view tag);

  RngStream child(std::string_view sub_tag) const;

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& tag() const noexcept { return tag_; }

  std::mt19937_64& engine() noexcept { return engine_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

 private:
  std::uint64_t seed_;
  std::string tag_;
  std::mt19937_64 engine_;
};

}  // namespace anatgraph

#include "anatgraph/rng.hpp"

namespace anatgraph {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::string_view tag)
    : seed_(seed), tag_(tag), engine_(splitmix64(splitmix64(seed) ^ fnv1a64(tag))) {}

RngStream RngStream::child(std::string_view sub_tag) const {
  return RngStream(seed_, tag_ + "/" + std::string(sub_tag));
}

}  // namespace anatgraph

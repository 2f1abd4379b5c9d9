#include "skyfill/rng.hpp"

#include <cmath>

#include "skyfill/common.hpp"

namespace skyfill {

double Rng::normal() {
  // u1 in (0,1] so the log is finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> tags) {
  // SplitMix-style avalanche over the concatenated words
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
  auto mix = [&h](std::uint64_t v) {
    h += v + 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    h = h ^ (h >> 31);
  };
  for (auto t : tags) mix(t);
  mix(0x5851f42d4c957f2dull);
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::string_view> tags) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
  auto mix = [&h](std::uint64_t v) {
    h += v + 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    h = h ^ (h >> 31);
  };
  for (const auto& t : tags) {
    mix(fnv1a64(t.data(), t.size()));
    mix(t.size());
  }
  mix(0x5851f42d4c957f2dull);
  return h;
}

}  // namespace skyfill

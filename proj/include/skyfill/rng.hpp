#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace skyfill {

// Small counter-free SplitMix64 generator. Chosen over std engines so
// sequences are identical across standard libraries, which the
// determinism and resume guarantees rely on. Streams are derived
// statelessly from (seed, tag...) so data workers and per-sample mask
// generation never share mutable state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform integer in [0, n), n > 0. Lemire reduction without the
  // rejection loop; bias is < 2^-32 for the n used here and, more
  // importantly, the mapping is fixed for all platforms.
  std::uint64_t uniform_index(std::uint64_t n) {
    using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((u128(next_u64()) * u128(n)) >> 64);
  }

  // Uniform double in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool coin() { return (next_u64() & 1ull) != 0; }

  // Standard normal via Box-Muller (single value; the pair's second
  // half is discarded to keep the draw count predictable).
  double normal();

  Rng split() { return Rng(next_u64()); }

 private:
  std::uint64_t state_;
};

// Stateless stream derivation: hashes the seed with an ordered tag
// list. String tags name the stream's purpose ("augment", "mask", ...)
// so call sites stay self-describing; numeric tags carry indices.
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> tags);
std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::string_view> tags);

inline Rng derive_rng(std::uint64_t seed,
                      std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(seed, tags));
}

inline Rng derive_rng(std::uint64_t seed,
                      std::initializer_list<std::string_view> tags) {
  return Rng(derive_seed(seed, tags));
}

}  // namespace skyfill

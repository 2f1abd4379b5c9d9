#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace skyfill {

// Error taxonomy shared by all modules. The CLI maps user-facing kinds
// (bad specs, bad config, bad flags) to exit code 1 and runtime kinds
// (I/O failures, non-finite state) to exit code 2.
enum class ErrorKind {
  invalid_spec,
  shape_mismatch,
  invalid_stride,
  heterogeneous_input,
  empty_input,
  invalid_stats,
  missing_label,
  label_domain,
  contract_violation,
  invalid_class_count,
  incompatible_checkpoint,
  corrupt_state,
  non_finite,
  config,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

  // true for kinds caused by bad user input rather than runtime failure
  bool user_error() const {
    switch (kind_) {
      case ErrorKind::io:
      case ErrorKind::corrupt_state:
      case ErrorKind::non_finite:
        return false;
      default:
        return true;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

// FNV-1a 64-bit, used for config and checkpoint digests (lineage
// bookkeeping, not integrity protection).
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

std::string hex64(std::uint64_t v);

}  // namespace skyfill

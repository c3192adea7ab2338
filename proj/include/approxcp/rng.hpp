#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace approxcp {

// Identifier recorded in every report so a rerun can check it uses the same
// generator law.
inline constexpr std::string_view kPrngAlgorithm =
    "mt19937_64/splitmix64-fnv1a-streams/box-muller-v1";

std::uint64_t splitmix64(std::uint64_t& state);

// 64-bit FNV-1a; also used for config hashes and blob checksums.
std::uint64_t fnv1a64(std::string_view bytes);

// Seed for an independent stream identified by `purpose` under `root`.
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose);

// Seeded generator. The engine is std::mt19937_64, whose output sequence is
// fixed by the standard; every distribution on top of it is implemented here
// so that draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Child stream for a named purpose ("data", "shuffle", ...).
  static Rng stream(std::uint64_t root, std::string_view purpose) {
    return Rng(derive_seed(root, purpose));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace approxcp

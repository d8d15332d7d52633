#pragma once

#include <cstdint>
#include <string>
#include <random>
#include <span>
#include <string_view>

namespace evoloop {

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);
// 16 lowercase hex digits.
std::string hex64(std::uint64_t v);

// Derives an independent seed for a named substream of a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index);

// mt19937_64 output is fixed by the standard; the helpers below avoid the
// implementation-defined std distributions so corpora are identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Inclusive bounds.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(n) - 1)); }
  bool bernoulli(double p) { return uniform01() < p; }
  std::size_t categorical(std::span<const double> probs);

 private:
  std::mt19937_64 engine_;
};

}  // namespace evoloop

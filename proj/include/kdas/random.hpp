#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace kdas {

using Rng = std::mt19937_64;

/// Derives independent named generators from one root seed, so adding a
/// consumer of one stream never perturbs another.
class SeedStreams {
 public:
  explicit SeedStreams(std::uint64_t root) : root_(root) {}

  std::uint64_t seed(std::string_view name) const;
  Rng stream(std::string_view name) const { return Rng(seed(name)); }
  SeedStreams child(std::string_view name) const { return SeedStreams(seed(name)); }
  std::uint64_t root() const { return root_; }

 private:
  std::uint64_t root_;
};

std::uint64_t splitmix64(std::uint64_t x);

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace kdas

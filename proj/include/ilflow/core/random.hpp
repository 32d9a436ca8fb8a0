#pragma once

#include <cstdint>
#include <random>

namespace ilflow {

// Deterministic RNG used everywhere. Seeds for sub-tasks (per-trajectory,
// per-worker) are derived with splitmix64 so that master seeds isolate runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double cauchy(double loc = 0.0, double scale = 1.0) {
    return std::cauchy_distribution<double>(loc, scale)(engine_);
  }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  // Independent stream for sub-task i of this generator's seed.
  Rng derive(std::uint64_t i) const { return Rng(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL + i))); }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace ilflow

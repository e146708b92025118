#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mmf {

// splitmix64 over (seed, FNV-1a(stream)). Every random consumer draws from a named
// substream so that changing one component does not perturb another.
uint64_t derive_seed(uint64_t seed, std::string_view stream);
uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index);

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  Rng(uint64_t seed, std::string_view stream) : engine_(derive_seed(seed, stream)) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  // Inclusive range.
  int64_t randint(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmf

#pragma once

#include <cstdint>
#include <random>

#include "zipmap/tensor.hpp"

namespace zipmap {

// Seed mixing for derived streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded generator whose draws are identical on every platform: the engine output is
// fixed by the standard, and the floating-point transforms are done here rather than
// through the implementation-defined <random> distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Child generator with an independent, reproducible stream.
  Rng fork(std::uint64_t salt);

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev = 1.0);
  template <typename T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace zipmap

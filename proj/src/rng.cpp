#include "zipmap/rng.hpp"

#include <cmath>
#include <numbers>

namespace zipmap {

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw ParameterError("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t draw = next_u64();
  while (draw >= limit) draw = next_u64();
  return lo + static_cast<std::int64_t>(draw % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Rng Rng::fork(std::uint64_t salt) {
  // splitmix64 finalizer over (next draw, salt)
  std::uint64_t z = next_u64() + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

template <typename T>
Tensor<T> Rng::normal_tensor(Shape shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(uniform(lo, hi));
  return t;
}

template Tensor<float> Rng::normal_tensor<float>(Shape, double);
template Tensor<double> Rng::normal_tensor<double>(Shape, double);
template Tensor<float> Rng::uniform_tensor<float>(Shape, double, double);
template Tensor<double> Rng::uniform_tensor<double>(Shape, double, double);

}  // namespace zipmap

#pragma once

#include <functional>

#include "zipmap/ops.hpp"

namespace zipmap {

// Quintic coefficients used by Muon for its Newton-Schulz step.
struct NewtonSchulzCoefficients {
  double a = 3.4445;
  double b = -4.7750;
  double c = 2.0315;
};

inline constexpr int kDefaultNewtonSchulzIters = 5;

// Pushes the singular values of g toward 1. The input is scaled to unit Frobenius norm
// first (eps 1e-7), then iterated X <- aX + (bA + cA^2)X with A = XX^T, working on the
// wide orientation so A is the smaller Gram matrix. Built from differentiable ops, so
// gradients flow through every iteration. An all-zero input stays zero.
template <typename T>
Tensor<T> newton_schulz_orthonormalize(const Tensor<T>& g, int iters = kDefaultNewtonSchulzIters,
                                       const NewtonSchulzCoefficients& coeffs = {});

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
template <typename T>
Tensor<T> finite_difference_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

// max_i |a_i - b_i| / max(|b_i|, floor), for comparing gradients.
template <typename T>
T max_relative_error(std::span<const T> a, std::span<const T> b, T floor = T(1e-6));

}  // namespace zipmap

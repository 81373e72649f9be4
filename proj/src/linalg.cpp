#include "zipmap/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace zipmap {

template <typename T>
Tensor<T> newton_schulz_orthonormalize(const Tensor<T>& g, int iters, const NewtonSchulzCoefficients& coeffs) {
  if (g.rank() != 2) throw ShapeError("newton_schulz_orthonormalize expects a matrix, got " + shape_string(g.shape()));
  if (iters < 0) throw ConfigError("newton_schulz_orthonormalize: negative iteration count");
  const bool tall = g.rows() > g.cols();
  // eps acts as a floor rather than an offset so NS(c g) = NS(g) for every c > 0.
  Tensor<T> norm = frobenius_norm(g);
  Tensor<T> x = norm.item() > T(1e-7) ? div_scalar(g, norm) : scale(g, T(1e7));
  if (tall) x = transpose(x);
  const T a = static_cast<T>(coeffs.a), b = static_cast<T>(coeffs.b), c = static_cast<T>(coeffs.c);
  for (int i = 0; i < iters; ++i) {
    Tensor<T> gram = matmul_nt(x, x);
    Tensor<T> poly = add(scale(gram, b), scale(matmul(gram, gram), c));
    x = add(scale(x, a), matmul(poly, x));
  }
  return tall ? transpose(x) : x;
}

template <typename T>
Tensor<T> finite_difference_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  NoGradGuard no_grad;
  Tensor<T> probe = x.detach();
  Tensor<T> grad(x.shape());
  auto values = probe.mutable_data();
  auto out = grad.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + h;
    const T up = f(probe);
    values[i] = saved - h;
    const T down = f(probe);
    values[i] = saved;
    out[i] = (up - down) / (T(2) * h);
  }
  return grad;
}

template <typename T>
T max_relative_error(std::span<const T> a, std::span<const T> b, T floor) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
  T worst(0);
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
  return worst;
}

template Tensor<float> newton_schulz_orthonormalize(const Tensor<float>&, int, const NewtonSchulzCoefficients&);
template Tensor<double> newton_schulz_orthonormalize(const Tensor<double>&, int, const NewtonSchulzCoefficients&);
template Tensor<float> finite_difference_grad(const std::function<float(const Tensor<float>&)>&,
                                              const Tensor<float>&, float);
template Tensor<double> finite_difference_grad(const std::function<double(const Tensor<double>&)>&,
                                               const Tensor<double>&, double);
template float max_relative_error(std::span<const float>, std::span<const float>, float);
template double max_relative_error(std::span<const double>, std::span<const double>, double);

}  // namespace zipmap

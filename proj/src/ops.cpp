#include "zipmap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace zipmap {

namespace {

template <typename T>
using Vec = std::vector<T>;

template <typename T>
bool needs_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

Shape with_last(Shape s, Index last) {
  if (s.empty()) return {1, last};
  s.back() = last;
  return s;
}

// y = f(x) elementwise; dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.node()->value;
  Vec<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x.node()}, [df](TensorNode<T>& self) {
    auto& px = self.parents[0];
    auto& gx = px->ensure_grad();
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(px->value[i], self.value[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void count_matmul(Index m, Index n, Index k) {
  FlopCounter::add(static_cast<std::uint64_t>(2) * static_cast<std::uint64_t>(m) *
                   static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(k));
}

}  // namespace

// ---- elementwise ------------------------------------------------------------------

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> silu_prime(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) - s) * (T(2) + v * (T(1) - T(2) * s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> arccos_clamped(const Tensor<T>& x, T eps) {
  const T lo = T(-1) + eps, hi = T(1) - eps;
  return unary(
      x, [lo, hi](T v) { return std::acos(std::clamp(v, lo, hi)); },
      [lo, hi](T v, T) {
        if (v <= lo || v >= hi) return T(0);
        return T(-1) / std::sqrt(T(1) - v * v);
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Vec<T> out(a.node()->value);
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
    for (auto& p : self.parents) {
      if (!needs_grad(p)) continue;
      auto& gp = p->ensure_grad();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Vec<T> out(a.node()->value);
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
    if (needs_grad(self.parents[0])) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (needs_grad(self.parents[1])) {
      auto& gb = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Vec<T> out(a.node()->value);
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs_grad(pa)) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * pb->value[i];
    }
    if (needs_grad(pb)) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  Vec<T> out(a.node()->value);
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs_grad(pa)) {
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / pb->value[i];
    }
    if (needs_grad(pb)) {
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i] * self.value[i] / pb->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scale must have one element");
  const T sv = s.item();
  Vec<T> out(x.node()->value);
  for (auto& v : out) v *= sv;
  return make_result<T>(x.shape(), std::move(out), {x.node(), s.node()}, [](TensorNode<T>& self) {
    auto& px = self.parents[0];
    auto& ps = self.parents[1];
    const T sv = ps->value[0];
    if (needs_grad(px)) {
      auto& gx = px->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * sv;
    }
    if (needs_grad(ps)) {
      T acc(0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
      ps->ensure_grad()[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("div_scalar: divisor must have one element");
  const T sv = s.item();
  Vec<T> out(x.node()->value);
  for (auto& v : out) v /= sv;
  return make_result<T>(x.shape(), std::move(out), {x.node(), s.node()}, [](TensorNode<T>& self) {
    auto& px = self.parents[0];
    auto& ps = self.parents[1];
    const T sv = ps->value[0];
    if (needs_grad(px)) {
      auto& gx = px->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] / sv;
    }
    if (needs_grad(ps)) {
      T acc(0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.value[i];
      ps->ensure_grad()[0] -= acc / sv;
    }
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  if (row.numel() != x.cols()) throw ShapeError("add_row: row length must equal cols");
  RowMatrix<T> out = x.matrix();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> r(row.data().data(), x.cols());
  out.rowwise() += r;
  return make_result<T>(x.shape(), Vec<T>(out.data(), out.data() + out.size()),
                        {x.node(), row.node()}, [](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          auto& pr = self.parents[1];
                          ConstMatrixMap<T> g(self.grad.data(), self.rows(), self.cols());
                          if (needs_grad(px)) px->grad_matrix() += g;
                          if (needs_grad(pr)) {
                            auto& gr = pr->ensure_grad();
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gmap(gr.data(), self.cols());
                            gmap += g.colwise().sum();
                          }
                        });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row) {
  if (row.numel() != x.cols()) throw ShapeError("mul_row: row length must equal cols");
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> r(row.data().data(), x.cols());
  RowMatrix<T> out = x.matrix().array().rowwise() * r.array();
  return make_result<T>(x.shape(), Vec<T>(out.data(), out.data() + out.size()),
                        {x.node(), row.node()}, [](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          auto& pr = self.parents[1];
                          const Index c = self.cols();
                          ConstMatrixMap<T> g(self.grad.data(), self.rows(), c);
                          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> r(pr->value.data(), c);
                          if (needs_grad(px)) px->grad_matrix().array() += g.array().rowwise() * r.array();
                          if (needs_grad(pr)) {
                            auto& gr = pr->ensure_grad();
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gmap(gr.data(), c);
                            gmap += (g.array() * px->value_matrix().array()).colwise().sum().matrix();
                          }
                        });
}

template <typename T>
Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& col) {
  if (col.numel() != x.rows()) throw ShapeError("mul_col: column length must equal rows");
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> c(col.data().data(), x.rows());
  RowMatrix<T> out = x.matrix().array().colwise() * c.array();
  return make_result<T>(x.shape(), Vec<T>(out.data(), out.data() + out.size()),
                        {x.node(), col.node()}, [](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          auto& pc = self.parents[1];
                          const Index r = self.rows();
                          ConstMatrixMap<T> g(self.grad.data(), r, self.cols());
                          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> c(pc->value.data(), r);
                          if (needs_grad(px)) px->grad_matrix().array() += g.array().colwise() * c.array();
                          if (needs_grad(pc)) {
                            auto& gc = pc->ensure_grad();
                            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gmap(gc.data(), r);
                            gmap += (g.array() * px->value_matrix().array()).rowwise().sum().matrix();
                          }
                        });
}

// ---- reductions ---------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& xv = x.node()->value;
  const T total = std::accumulate(xv.begin(), xv.end(), T(0));
  return make_result<T>(Shape{}, Vec<T>{total}, {x.node()}, [](TensorNode<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (auto& v : gx) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> row_sum(const Tensor<T>& x) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> s = x.matrix().rowwise().sum();
  return make_result<T>(Shape{x.rows(), 1}, Vec<T>(s.data(), s.data() + s.size()), {x.node()},
                        [](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> g(self.grad.data(),
                                                                                  self.rows());
                          px->grad_matrix().colwise() += g;
                        });
}

template <typename T>
Tensor<T> frobenius_norm(const Tensor<T>& x) {
  const T n = x.matrix().norm();
  return make_result<T>(Shape{}, Vec<T>{n}, {x.node()}, [](TensorNode<T>& self) {
    const T n = self.value[0];
    if (n == T(0)) return;
    auto& px = self.parents[0];
    auto& gx = px->ensure_grad();
    const T f = self.grad[0] / n;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += f * px->value[i];
  });
}

template <typename T>
Tensor<T> l2norm(const Tensor<T>& x) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> n = x.matrix().rowwise().norm();
  return make_result<T>(Shape{x.rows(), 1}, Vec<T>(n.data(), n.data() + n.size()), {x.node()},
                        [](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          auto gx = px->grad_matrix();
                          auto xv = px->value_matrix();
                          for (Index r = 0; r < gx.rows(); ++r) {
                            const T n = self.value[static_cast<std::size_t>(r)];
                            if (n > T(0)) gx.row(r) += (self.grad[static_cast<std::size_t>(r)] / n) * xv.row(r);
                          }
                        });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  const Index rows = x.rows();
  auto xv = x.matrix();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = (xv.rowwise().squaredNorm().array() + eps).sqrt();
  RowMatrix<T> out = xv.array().colwise() / norms.array();
  return make_result<T>(x.shape(), Vec<T>(out.data(), out.data() + out.size()), {x.node()},
                        [norms, rows](TensorNode<T>& self) {
                          auto& px = self.parents[0];
                          ConstMatrixMap<T> g(self.grad.data(), rows, self.cols());
                          ConstMatrixMap<T> y(self.value.data(), rows, self.cols());
                          auto gx = px->grad_matrix();
                          for (Index r = 0; r < rows; ++r) {
                            const T dot = y.row(r).dot(g.row(r));
                            gx.row(r) += (g.row(r) - dot * y.row(r)) / norms(r);
                          }
                        });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const Index rows = x.rows(), cols = x.cols();
  if (gain.defined() && gain.numel() != cols) throw ShapeError("rmsnorm: gain length must equal cols");
  auto xv = x.matrix();
  Eigen::Matrix<T, Eigen::Dynamic, 1> rms =
      (xv.rowwise().squaredNorm().array() / static_cast<T>(cols) + eps).sqrt();
  RowMatrix<T> normed = xv.array().colwise() / rms.array();
  RowMatrix<T> out = normed;
  if (gain.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> gv(gain.data().data(), cols);
    out.array().rowwise() *= gv.array();
  }
  std::vector<NodePtr<T>> inputs{x.node()};
  if (gain.defined()) inputs.push_back(gain.node());
  return make_result<T>(
      x.shape(), Vec<T>(out.data(), out.data() + out.size()), std::move(inputs),
      [rms, normed, rows, cols](TensorNode<T>& self) {
        ConstMatrixMap<T> g(self.grad.data(), rows, cols);
        RowMatrix<T> gn = g;
        if (self.parents.size() > 1) {
          auto& pg = self.parents[1];
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> gv(pg->value.data(), cols);
          if (needs_grad(pg)) {
            auto& gg = pg->ensure_grad();
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gmap(gg.data(), cols);
            gmap += (g.array() * normed.array()).colwise().sum().matrix();
          }
          gn.array().rowwise() *= gv.array();
        }
        auto& px = self.parents[0];
        if (!needs_grad(px)) return;
        auto gx = px->grad_matrix();
        for (Index r = 0; r < rows; ++r) {
          const T m = gn.row(r).dot(normed.row(r)) / static_cast<T>(cols);
          gx.row(r) += (gn.row(r) - m * normed.row(r)) / rms(r);
        }
      });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, T eps) {
  return rmsnorm(x, Tensor<T>(), eps);
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  RowMatrix<T> y = x.matrix();
  for (Index r = 0; r < y.rows(); ++r) {
    y.row(r).array() -= y.row(r).maxCoeff();
    y.row(r) = y.row(r).array().exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_result<T>(x.shape(), Vec<T>(y.data(), y.data() + y.size()), {x.node()},
                        [](TensorNode<T>& self) {
                          ConstMatrixMap<T> g(self.grad.data(), self.rows(), self.cols());
                          ConstMatrixMap<T> y(self.value.data(), self.rows(), self.cols());
                          Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (g.array() * y.array()).rowwise().sum();
                          self.parents[0]->grad_matrix().array() +=
                              y.array() * (g.array().colwise() - dots.array());
                        });
}

// ---- linear algebra -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  const Index m = a.rows(), k = a.cols(), n = b.cols();
  count_matmul<T>(m, n, k);
  RowMatrix<T> c(m, n);
  c.noalias() = a.matrix() * b.matrix();
  return make_result<T>(with_last(a.shape(), n), Vec<T>(c.data(), c.data() + c.size()),
                        {a.node(), b.node()}, [m, n, k](TensorNode<T>& self) {
                          auto& pa = self.parents[0];
                          auto& pb = self.parents[1];
                          ConstMatrixMap<T> g(self.grad.data(), m, n);
                          if (needs_grad(pa)) {
                            count_matmul<T>(m, k, n);
                            pa->grad_matrix().noalias() += g * pb->value_matrix().transpose();
                          }
                          if (needs_grad(pb)) {
                            count_matmul<T>(k, n, m);
                            pb->grad_matrix().noalias() += pa->value_matrix().transpose() * g;
                          }
                        });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  const Index m = a.rows(), k = a.cols(), n = b.rows();
  count_matmul<T>(m, n, k);
  RowMatrix<T> c(m, n);
  c.noalias() = a.matrix() * b.matrix().transpose();
  return make_result<T>(with_last(a.shape(), n), Vec<T>(c.data(), c.data() + c.size()),
                        {a.node(), b.node()}, [m, n, k](TensorNode<T>& self) {
                          auto& pa = self.parents[0];
                          auto& pb = self.parents[1];
                          ConstMatrixMap<T> g(self.grad.data(), m, n);
                          if (needs_grad(pa)) {
                            count_matmul<T>(m, k, n);
                            pa->grad_matrix().noalias() += g * pb->value_matrix();
                          }
                          if (needs_grad(pb)) {
                            count_matmul<T>(n, k, m);
                            pb->grad_matrix().noalias() += g.transpose() * pa->value_matrix();
                          }
                        });
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: inner dimensions differ, " + shape_string(a.shape()) + "^T x " +
                     shape_string(b.shape()));
  const Index m = a.cols(), k = a.rows(), n = b.cols();
  count_matmul<T>(m, n, k);
  RowMatrix<T> c(m, n);
  c.noalias() = a.matrix().transpose() * b.matrix();
  return make_result<T>(Shape{m, n}, Vec<T>(c.data(), c.data() + c.size()), {a.node(), b.node()},
                        [m, n, k](TensorNode<T>& self) {
                          auto& pa = self.parents[0];
                          auto& pb = self.parents[1];
                          ConstMatrixMap<T> g(self.grad.data(), m, n);
                          if (needs_grad(pa)) {
                            count_matmul<T>(k, m, n);
                            pa->grad_matrix().noalias() += pb->value_matrix() * g.transpose();
                          }
                          if (needs_grad(pb)) {
                            count_matmul<T>(k, n, m);
                            pb->grad_matrix().noalias() += pa->value_matrix() * g;
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Tensor<T> y = matmul_nt(x, w);
  return bias.defined() ? add_row(y, bias) : y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const Index r = x.rows(), c = x.cols();
  RowMatrix<T> t = x.matrix().transpose();
  return make_result<T>(Shape{c, r}, Vec<T>(t.data(), t.data() + t.size()), {x.node()},
                        [r, c](TensorNode<T>& self) {
                          ConstMatrixMap<T> g(self.grad.data(), c, r);
                          self.parents[0]->grad_matrix() += g.transpose();
                        });
}

template <typename T>
Tensor<T> outer(const Tensor<T>& u, const Tensor<T>& v) {
  const Index m = u.numel(), n = v.numel();
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> uv(u.data().data(), m);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vv(v.data().data(), n);
  RowMatrix<T> o = uv * vv.transpose();
  return make_result<T>(Shape{m, n}, Vec<T>(o.data(), o.data() + o.size()), {u.node(), v.node()},
                        [m, n](TensorNode<T>& self) {
                          auto& pu = self.parents[0];
                          auto& pv = self.parents[1];
                          ConstMatrixMap<T> g(self.grad.data(), m, n);
                          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> uv(pu->value.data(), m);
                          Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vv(pv->value.data(), n);
                          if (needs_grad(pu)) {
                            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gu(pu->ensure_grad().data(), m);
                            gu += g * vv;
                          }
                          if (needs_grad(pv)) {
                            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gv(pv->ensure_grad().data(), n);
                            gv += g.transpose() * uv;
                          }
                        });
}

template <typename T>
Tensor<T> cross3(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.cols() != 3 || v.cols() != 3) throw ShapeError("cross3: trailing dimension must be 3");
  require_same_shape(u, v, "cross3");
  const Index rows = u.rows();
  auto cross_row = [](const T* a, const T* b, T* out, T sign) {
    out[0] += sign * (a[1] * b[2] - a[2] * b[1]);
    out[1] += sign * (a[2] * b[0] - a[0] * b[2]);
    out[2] += sign * (a[0] * b[1] - a[1] * b[0]);
  };
  Vec<T> out(static_cast<std::size_t>(rows * 3), T(0));
  for (Index r = 0; r < rows; ++r)
    cross_row(u.data().data() + 3 * r, v.data().data() + 3 * r, out.data() + 3 * r, T(1));
  return make_result<T>(u.shape(), std::move(out), {u.node(), v.node()},
                        [rows, cross_row](TensorNode<T>& self) {
                          auto& pu = self.parents[0];
                          auto& pv = self.parents[1];
                          // d/du (u x v).g = v x g ; d/dv = g x u
                          for (Index r = 0; r < rows; ++r) {
                            const T* g = self.grad.data() + 3 * r;
                            if (needs_grad(pu))
                              cross_row(pv->value.data() + 3 * r, g, pu->ensure_grad().data() + 3 * r, T(1));
                            if (needs_grad(pv))
                              cross_row(g, pu->value.data() + 3 * r, pv->ensure_grad().data() + 3 * r, T(1));
                          }
                        });
}

// ---- layout -------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  return make_result<T>(std::move(shape), x.node()->value, {x.node()}, [](TensorNode<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows())
    throw ShapeError("slice_rows: range out of bounds for " + shape_string(x.shape()));
  const Index c = x.cols();
  const auto& xv = x.node()->value;
  Vec<T> out(xv.begin() + begin * c, xv.begin() + (begin + count) * c);
  return make_result<T>(Shape{count, c}, std::move(out), {x.node()}, [begin, c](TensorNode<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[static_cast<std::size_t>(begin * c) + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols())
    throw ShapeError("slice_cols: range out of bounds for " + shape_string(x.shape()));
  const Index r = x.rows();
  RowMatrix<T> out = x.matrix().middleCols(begin, count);
  return make_result<T>(with_last(x.shape(), count), Vec<T>(out.data(), out.data() + out.size()),
                        {x.node()}, [begin, count, r](TensorNode<T>& self) {
                          ConstMatrixMap<T> g(self.grad.data(), r, count);
                          self.parents[0]->grad_matrix().middleCols(begin, count) += g;
                        });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index c = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
  }
  Vec<T> out;
  out.reserve(static_cast<std::size_t>(total * c));
  std::vector<NodePtr<T>> inputs;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  return make_result<T>(Shape{total, c}, std::move(out), std::move(inputs), [](TensorNode<T>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (needs_grad(p)) {
        auto& gp = p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index r = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  RowMatrix<T> out(r, total);
  std::vector<NodePtr<T>> inputs;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.matrix();
    offset += p.cols();
    inputs.push_back(p.node());
  }
  return make_result<T>(Shape{r, total}, Vec<T>(out.data(), out.data() + out.size()),
                        std::move(inputs), [r, total](TensorNode<T>& self) {
                          ConstMatrixMap<T> g(self.grad.data(), r, total);
                          Index offset = 0;
                          for (auto& p : self.parents) {
                            const Index c = p->cols();
                            if (needs_grad(p)) p->grad_matrix() += g.middleCols(offset, c);
                            offset += c;
                          }
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<Index>& index) {
  const Index c = x.cols(), rows = x.rows();
  const auto& xv = x.node()->value;
  Vec<T> out(index.size() * static_cast<std::size_t>(c), T(0));
  for (std::size_t i = 0; i < index.size(); ++i) {
    const Index src = index[i];
    if (src >= rows) throw ShapeError("gather_rows: index out of range");
    if (src < 0) continue;
    std::copy_n(xv.begin() + src * c, c, out.begin() + static_cast<std::ptrdiff_t>(i) * c);
  }
  return make_result<T>(Shape{static_cast<Index>(index.size()), c}, std::move(out), {x.node()},
                        [index, c](TensorNode<T>& self) {
                          auto& gx = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < index.size(); ++i) {
                            const Index src = index[i];
                            if (src < 0) continue;
                            const T* g = self.grad.data() + static_cast<std::ptrdiff_t>(i) * c;
                            T* dst = gx.data() + src * c;
                            for (Index j = 0; j < c; ++j) dst[j] += g[j];
                          }
                        });
}

// ---- attention and positional encoding -----------------------------------------------

template <typename T>
Tensor<T> rotary(const Tensor<T>& x, const RowMatrix<T>& cos, const RowMatrix<T>& sin) {
  const Index rows = x.rows(), cols = x.cols();
  if (cols % 2 != 0 || cos.cols() * 2 != cols || sin.rows() != cos.rows() || sin.cols() != cos.cols() ||
      cos.rows() == 0 || rows % cos.rows() != 0)
    throw ShapeError("rotary: table shape incompatible with " + shape_string(x.shape()));
  const Index period = cos.rows(), half = cols / 2;
  Vec<T> out(x.node()->value.size());
  const T* xv = x.data().data();
  for (Index r = 0; r < rows; ++r) {
    const Index tr = r % period;
    for (Index j = 0; j < half; ++j) {
      const T c = cos(tr, j), s = sin(tr, j);
      const T a = xv[r * cols + 2 * j], b = xv[r * cols + 2 * j + 1];
      out[static_cast<std::size_t>(r * cols + 2 * j)] = a * c - b * s;
      out[static_cast<std::size_t>(r * cols + 2 * j + 1)] = a * s + b * c;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()},
                        [cos, sin, rows, cols, period, half](TensorNode<T>& self) {
                          auto& gx = self.parents[0]->ensure_grad();
                          for (Index r = 0; r < rows; ++r) {
                            const Index tr = r % period;
                            for (Index j = 0; j < half; ++j) {
                              const T c = cos(tr, j), s = sin(tr, j);
                              const std::size_t i0 = static_cast<std::size_t>(r * cols + 2 * j);
                              const T ga = self.grad[i0], gb = self.grad[i0 + 1];
                              gx[i0] += ga * c + gb * s;
                              gx[i0 + 1] += -ga * s + gb * c;
                            }
                          }
                        });
}

namespace {

template <typename T>
void softmax_inplace(RowMatrix<T>& s) {
  for (Index r = 0; r < s.rows(); ++r) {
    s.row(r).array() -= s.row(r).maxCoeff();
    s.row(r) = s.row(r).array().exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

template <typename T>
Tensor<T> block_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                          Index q_block, Index kv_block) {
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw ConfigError("block_attention: channels not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
    throw ShapeError("block_attention: q/k/v channel or row mismatch");
  if (q_block <= 0 || kv_block <= 0 || q.rows() % q_block != 0 || k.rows() % kv_block != 0 ||
      q.rows() / q_block != k.rows() / kv_block)
    throw ShapeError("block_attention: rows do not split into matching blocks");
  const Index blocks = q.rows() / q_block, hd = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));

  RowMatrix<T> out(q.rows(), d);
  auto qm = q.matrix();
  auto km = k.matrix();
  auto vm = v.matrix();
  for (Index b = 0; b < blocks; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = qm.block(b * q_block, h * hd, q_block, hd);
      auto kb = km.block(b * kv_block, h * hd, kv_block, hd);
      auto vb = vm.block(b * kv_block, h * hd, kv_block, hd);
      RowMatrix<T> s = (qb * kb.transpose()) * scale_factor;
      softmax_inplace(s);
      out.block(b * q_block, h * hd, q_block, hd).noalias() = s * vb;
      count_matmul<T>(q_block, kv_block, hd);
      count_matmul<T>(q_block, hd, kv_block);
    }
  }
  return make_result<T>(
      with_last(q.shape(), d), Vec<T>(out.data(), out.data() + out.size()), {q.node(), k.node(), v.node()},
      [blocks, heads, hd, q_block, kv_block, scale_factor](TensorNode<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        const Index d = heads * hd;
        ConstMatrixMap<T> g(self.grad.data(), blocks * q_block, d);
        auto qm = pq->value_matrix();
        auto km = pk->value_matrix();
        auto vm = pv->value_matrix();
        for (Index b = 0; b < blocks; ++b) {
          for (Index h = 0; h < heads; ++h) {
            auto qb = qm.block(b * q_block, h * hd, q_block, hd);
            auto kb = km.block(b * kv_block, h * hd, kv_block, hd);
            auto vb = vm.block(b * kv_block, h * hd, kv_block, hd);
            auto gb = g.block(b * q_block, h * hd, q_block, hd);
            RowMatrix<T> p = (qb * kb.transpose()) * scale_factor;
            softmax_inplace(p);
            if (needs_grad(pv)) pv->grad_matrix().block(b * kv_block, h * hd, kv_block, hd).noalias() += p.transpose() * gb;
            RowMatrix<T> dp = gb * vb.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (dp.array() * p.array()).rowwise().sum();
            RowMatrix<T> ds = (p.array() * (dp.array().colwise() - dots.array())) * scale_factor;
            if (needs_grad(pq)) pq->grad_matrix().block(b * q_block, h * hd, q_block, hd).noalias() += ds * kb;
            if (needs_grad(pk)) pk->grad_matrix().block(b * kv_block, h * hd, kv_block, hd).noalias() += ds.transpose() * qb;
            count_matmul<T>(q_block, kv_block, hd);
            count_matmul<T>(q_block, kv_block, hd);
            count_matmul<T>(q_block, hd, kv_block);
            count_matmul<T>(kv_block, hd, q_block);
            count_matmul<T>(kv_block, hd, q_block);
          }
        }
      });
}

namespace {

struct AxisTaps {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

AxisTaps bilinear_taps(Index in, Index out) {
  AxisTaps taps;
  taps.lo.resize(static_cast<std::size_t>(out));
  taps.hi.resize(static_cast<std::size_t>(out));
  taps.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min<Index>(lo + 1, in - 1);
    taps.lo[static_cast<std::size_t>(o)] = lo;
    taps.hi[static_cast<std::size_t>(o)] = hi;
    taps.frac[static_cast<std::size_t>(o)] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, Index views, Index grid_h, Index grid_w, Index height,
                            Index width) {
  if (views <= 0 || grid_h <= 0 || grid_w <= 0 || height <= 0 || width <= 0 ||
      x.rows() != views * grid_h * grid_w)
    throw ShapeError("bilinear_upsample: rows do not match views x grid");
  const Index c = x.cols();
  const AxisTaps ty = bilinear_taps(grid_h, height), tx = bilinear_taps(grid_w, width);
  RowMatrix<T> out(views * height * width, c);
  auto xm = x.matrix();
  for (Index v = 0; v < views; ++v) {
    const Index base = v * grid_h * grid_w;
    for (Index y = 0; y < height; ++y) {
      const auto yi = static_cast<std::size_t>(y);
      const T fy = static_cast<T>(ty.frac[yi]);
      for (Index xx = 0; xx < width; ++xx) {
        const auto xi = static_cast<std::size_t>(xx);
        const T fx = static_cast<T>(tx.frac[xi]);
        const Index r = (v * height + y) * width + xx;
        out.row(r) = (T(1) - fy) * ((T(1) - fx) * xm.row(base + ty.lo[yi] * grid_w + tx.lo[xi]) +
                                    fx * xm.row(base + ty.lo[yi] * grid_w + tx.hi[xi])) +
                     fy * ((T(1) - fx) * xm.row(base + ty.hi[yi] * grid_w + tx.lo[xi]) +
                           fx * xm.row(base + ty.hi[yi] * grid_w + tx.hi[xi]));
      }
    }
  }
  return make_result<T>(Shape{views * height * width, c}, Vec<T>(out.data(), out.data() + out.size()),
                        {x.node()}, [ty, tx, views, grid_h, grid_w, height, width, c](TensorNode<T>& self) {
                          ConstMatrixMap<T> g(self.grad.data(), views * height * width, c);
                          auto gx = self.parents[0]->grad_matrix();
                          for (Index v = 0; v < views; ++v) {
                            const Index base = v * grid_h * grid_w;
                            for (Index y = 0; y < height; ++y) {
                              const auto yi = static_cast<std::size_t>(y);
                              const T fy = static_cast<T>(ty.frac[yi]);
                              for (Index xx = 0; xx < width; ++xx) {
                                const auto xi = static_cast<std::size_t>(xx);
                                const T fx = static_cast<T>(tx.frac[xi]);
                                const auto gr = g.row((v * height + y) * width + xx);
                                gx.row(base + ty.lo[yi] * grid_w + tx.lo[xi]) += (T(1) - fy) * (T(1) - fx) * gr;
                                gx.row(base + ty.lo[yi] * grid_w + tx.hi[xi]) += (T(1) - fy) * fx * gr;
                                gx.row(base + ty.hi[yi] * grid_w + tx.lo[xi]) += fy * (T(1) - fx) * gr;
                                gx.row(base + ty.hi[yi] * grid_w + tx.hi[xi]) += fy * fx * gr;
                              }
                            }
                          }
                        });
}

namespace {

template <typename T>
Eigen::Matrix<T, 3, 3> quat_matrix(const T* q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix<T, 3, 3> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Partial derivatives of quat_matrix with respect to (w, x, y, z).
template <typename T>
std::array<Eigen::Matrix<T, 3, 3>, 4> quat_matrix_partials(const T* q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  std::array<Eigen::Matrix<T, 3, 3>, 4> d;
  d[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  d[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  d[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  d[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (auto& m : d) m *= T(2);
  return d;
}

}  // namespace

template <typename T>
Tensor<T> quat_rotate(const Tensor<T>& q, const Tensor<T>& v) {
  if (q.cols() != 4 || v.cols() != 3 || q.rows() != v.rows())
    throw ShapeError("quat_rotate: expects n x 4 quaternions and n x 3 vectors");
  const Index n = q.rows();
  Vec<T> out(static_cast<std::size_t>(n * 3));
  for (Index r = 0; r < n; ++r) {
    Eigen::Map<const Eigen::Matrix<T, 3, 1>> vr(v.data().data() + 3 * r);
    Eigen::Map<Eigen::Matrix<T, 3, 1>> o(out.data() + 3 * r);
    o = quat_matrix(q.data().data() + 4 * r) * vr;
  }
  return make_result<T>(v.shape(), std::move(out), {q.node(), v.node()}, [n](TensorNode<T>& self) {
    auto& pq = self.parents[0];
    auto& pv = self.parents[1];
    for (Index r = 0; r < n; ++r) {
      const T* qr = pq->value.data() + 4 * r;
      Eigen::Map<const Eigen::Matrix<T, 3, 1>> vr(pv->value.data() + 3 * r);
      Eigen::Map<const Eigen::Matrix<T, 3, 1>> g(self.grad.data() + 3 * r);
      if (needs_grad(pv)) {
        Eigen::Map<Eigen::Matrix<T, 3, 1>> gv(pv->ensure_grad().data() + 3 * r);
        gv += quat_matrix(qr).transpose() * g;
      }
      if (needs_grad(pq)) {
        const auto partials = quat_matrix_partials(qr);
        T* gq = pq->ensure_grad().data() + 4 * r;
        for (int k = 0; k < 4; ++k) gq[k] += g.dot(partials[static_cast<std::size_t>(k)] * vr);
      }
    }
  });
}

#define ZIPMAP_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> neg(const Tensor<T>&);                                                        \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> abs(const Tensor<T>&);                                                        \
  template Tensor<T> square(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> silu(const Tensor<T>&);                                                       \
  template Tensor<T> silu_prime(const Tensor<T>&);                                                 \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                \
  template Tensor<T> arccos_clamped(const Tensor<T>&, T);                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> div_scalar(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul_col(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> row_sum(const Tensor<T>&);                                                    \
  template Tensor<T> frobenius_norm(const Tensor<T>&);                                             \
  template Tensor<T> l2norm(const Tensor<T>&);                                                     \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                            \
  template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> rmsnorm(const Tensor<T>&, T);                                                 \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> outer(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> cross3(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> slice_rows(const Tensor<T>&, Index, Index);                                   \
  template Tensor<T> slice_cols(const Tensor<T>&, Index, Index);                                   \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<Index>&);                     \
  template Tensor<T> rotary(const Tensor<T>&, const RowMatrix<T>&, const RowMatrix<T>&);           \
  template Tensor<T> block_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index,   \
                                     Index, Index);                                                \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, Index, Index, Index, Index, Index);       \
  template Tensor<T> quat_rotate(const Tensor<T>&, const Tensor<T>&);

ZIPMAP_INSTANTIATE_OPS(float)
ZIPMAP_INSTANTIATE_OPS(double)

}  // namespace zipmap

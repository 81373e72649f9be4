#pragma once

// Differentiable tensor operations. Everything here is explicitly instantiated for
// float and double; double exists for gradient checks.
//
// Shapes follow a row-major 2D reading: the last extent is "cols", everything before it
// is folded into "rows".

#include <vector>

#include "zipmap/tensor.hpp"

namespace zipmap {

// ---- elementwise ------------------------------------------------------------------

template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
// d/dx silu(x); itself differentiable so fast-weight gradients can be trained through.
template <typename T> Tensor<T> silu_prime(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);
// acos(clamp(x, -1 + eps, 1 - eps)).
template <typename T> Tensor<T> arccos_clamped(const Tensor<T>& x, T eps);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T s);
// x * s where s is a one-element tensor.
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s);
template <typename T> Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s);

// Broadcasts: `row` has cols() entries and applies to every row, `col` has rows() entries
// and applies to every column.
template <typename T> Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T> Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T> Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& col);

// ---- reductions ---------------------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Per-row sum, shape rows x 1.
template <typename T> Tensor<T> row_sum(const Tensor<T>& x);
template <typename T> Tensor<T> frobenius_norm(const Tensor<T>& x);
// Per-row L2 norm, shape rows x 1.
template <typename T> Tensor<T> l2norm(const Tensor<T>& x);
// Rows scaled to unit L2 norm (eps guards zero rows).
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));
// x / rms(x) * gain along the last axis; `gain` has cols() entries.
template <typename T> Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6));
template <typename T> Tensor<T> rmsnorm(const Tensor<T>& x, T eps = T(1e-6));
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

// ---- linear algebra -----------------------------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a * b^T
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// a^T * b
template <typename T> Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);
// x * w^T + bias, with w stored out x in. `bias` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {});
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> outer(const Tensor<T>& u, const Tensor<T>& v);
// Row-wise cross product; requires cols() == 3.
template <typename T> Tensor<T> cross3(const Tensor<T>& u, const Tensor<T>& v);

// ---- layout -------------------------------------------------------------------------

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, Index begin, Index count);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, Index begin, Index count);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
// out.row(i) = x.row(index[i]), or zeros where index[i] < 0.
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<Index>& index);

// ---- attention and positional encoding -----------------------------------------------

// Rotates consecutive channel pairs (2j, 2j+1) of each row by the angle whose cos/sin sit
// in column j of `cos`/`sin`. The tables are periodic over rows: row r of x uses table
// row r % table_rows.
template <typename T>
Tensor<T> rotary(const Tensor<T>& x, const RowMatrix<T>& cos, const RowMatrix<T>& sin);

// Multi-head softmax attention computed independently per block: query rows are cut into
// blocks of `q_block`, key/value rows into blocks of `kv_block`, and block b of the
// queries attends only to block b of the keys. Channels are split evenly across heads.
template <typename T>
Tensor<T> block_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                          Index q_block, Index kv_block);

// Bilinear (half-pixel centers, edge clamped) upsampling of `views` feature grids stored
// as (views * grid_h * grid_w) x C rows to (views * height * width) x C.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, Index views, Index grid_h, Index grid_w, Index height,
                            Index width);

// Rotates the 3-vectors in v by the unit quaternions (w, x, y, z) in q, row by row.
template <typename T> Tensor<T> quat_rotate(const Tensor<T>& q, const Tensor<T>& v);

}  // namespace zipmap

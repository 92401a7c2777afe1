#pragma once

#include <span>

#include "cmil/matrix.hpp"

// Dense kernels behind the models, losses and evaluation modules.
//
// Every kernel exists twice: a plain serial loop under kernels::serial and
// an OpenMP variant at kernels:: scope. Both run the same per-row helper,
// so outputs are bitwise identical regardless of thread count; the serial
// path is the reference the tests and the benchmark compare against.

namespace cmil::kernels {

namespace serial {

/// C = A * B^T.  A: m x k, B: n x k -> C: m x n.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// C = A * B.  A: m x k, B: k x n -> C: m x n.
Matrix matmul_nn(const Matrix& a, const Matrix& b);

/// C = A^T * B.  A: k x m, B: k x n -> C: m x n.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// m(i, :) += bias
void add_bias_rows(Matrix& m, std::span<const double> bias);

/// Column sums (bias gradients).
Vec colsum(const Matrix& m);

void tanh_inplace(Matrix& m);

/// dH = dA .* (1 - A^2) where A = tanh(H).
Matrix tanh_backward(const Matrix& activation, const Matrix& grad);

/// Row-wise softmax, numerically stabilized by the row max.
void softmax_rows(Matrix& m);

/// D(i, j) = || a_i - b_j ||_2.
Matrix pairwise_euclidean(const Matrix& a, const Matrix& b);

/// D(i, j) = 1 - cos(a_i, b_j); rows with zero norm give distance 1.
Matrix pairwise_cosine(const Matrix& a, const Matrix& b);

/// Normalizes each row to unit L2 norm; norms below eps are clamped.
void l2_normalize_rows(Matrix& m, double eps = 1e-12);

}  // namespace serial

Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_nn(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
void add_bias_rows(Matrix& m, std::span<const double> bias);
Vec colsum(const Matrix& m);
void tanh_inplace(Matrix& m);
Matrix tanh_backward(const Matrix& activation, const Matrix& grad);
void softmax_rows(Matrix& m);
Matrix pairwise_euclidean(const Matrix& a, const Matrix& b);
Matrix pairwise_cosine(const Matrix& a, const Matrix& b);
void l2_normalize_rows(Matrix& m, double eps = 1e-12);

/// Fixed-order pairwise tree reduction of the rows of m (sum per column).
/// The reduction order depends only on the row count, so the same multiset
/// of rows reduces to nearly identical sums under any permutation.
Vec tree_sum_rows(const Matrix& m);

}  // namespace cmil::kernels

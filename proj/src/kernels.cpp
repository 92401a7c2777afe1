#include "cmil/kernels.hpp"

#include <cassert>
#include <cmath>
#include <cstdint>

namespace cmil::kernels {

namespace detail {

// Per-row bodies shared by the serial and OpenMP entry points. Each writes
// one output row with a fixed-order inner loop, which is what makes the two
// paths bitwise equal.

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& out,
                          std::size_t i) {
  const std::size_t k = a.cols();
  const double* arow = a.data() + i * k;
  for (std::size_t j = 0; j < b.rows(); ++j) {
    const double* brow = b.data() + j * k;
    double acc = 0.0;
    for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
    out(i, j) = acc;
  }
}

inline void matmul_nn_row(const Matrix& a, const Matrix& b, Matrix& out,
                          std::size_t i) {
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  const double* arow = a.data() + i * k;
  double* orow = out.data() + i * n;
  for (std::size_t j = 0; j < n; ++j) orow[j] = 0.0;
  for (std::size_t t = 0; t < k; ++t) {
    const double av = arow[t];
    const double* brow = b.data() + t * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
  }
}

inline void matmul_tn_row(const Matrix& a, const Matrix& b, Matrix& out,
                          std::size_t i) {
  // out(i, j) = sum_t a(t, i) * b(t, j)
  const std::size_t n = b.cols();
  const std::size_t k = a.rows();
  double* orow = out.data() + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t t = 0; t < k; ++t) acc += a(t, i) * b(t, j);
    orow[j] = acc;
  }
}

inline void add_bias_row(Matrix& m, std::span<const double> bias,
                         std::size_t i) {
  double* row = m.data() + i * m.cols();
  for (std::size_t j = 0; j < bias.size(); ++j) row[j] += bias[j];
}

inline void colsum_col(const Matrix& m, Vec& out, std::size_t j) {
  double acc = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) acc += m(i, j);
  out[j] = acc;
}

inline void tanh_row(Matrix& m, std::size_t i) {
  double* row = m.data() + i * m.cols();
  for (std::size_t j = 0; j < m.cols(); ++j) row[j] = std::tanh(row[j]);
}

inline void tanh_backward_row(const Matrix& a, const Matrix& g, Matrix& out,
                              std::size_t i) {
  for (std::size_t j = 0; j < a.cols(); ++j) {
    const double t = a(i, j);
    out(i, j) = g(i, j) * (1.0 - t * t);
  }
}

inline void softmax_row(Matrix& m, std::size_t i) {
  double* row = m.data() + i * m.cols();
  const std::size_t n = m.cols();
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
}

inline void euclidean_row(const Matrix& a, const Matrix& b, Matrix& out,
                          std::size_t i) {
  const std::size_t d = a.cols();
  const double* arow = a.data() + i * d;
  for (std::size_t j = 0; j < b.rows(); ++j) {
    const double* brow = b.data() + j * d;
    double acc = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      const double diff = arow[t] - brow[t];
      acc += diff * diff;
    }
    out(i, j) = std::sqrt(acc);
  }
}

inline void cosine_row(const Matrix& a, const Matrix& b, Matrix& out,
                       std::size_t i) {
  const std::size_t d = a.cols();
  const double* arow = a.data() + i * d;
  double na = 0.0;
  for (std::size_t t = 0; t < d; ++t) na += arow[t] * arow[t];
  na = std::sqrt(na);
  for (std::size_t j = 0; j < b.rows(); ++j) {
    const double* brow = b.data() + j * d;
    double dot = 0.0;
    double nb = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
      dot += arow[t] * brow[t];
      nb += brow[t] * brow[t];
    }
    nb = std::sqrt(nb);
    out(i, j) = (na == 0.0 || nb == 0.0) ? 1.0 : 1.0 - dot / (na * nb);
  }
}

inline void l2_normalize_row(Matrix& m, double eps, std::size_t i) {
  double* row = m.data() + i * m.cols();
  double norm = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) norm += row[j] * row[j];
  norm = std::max(std::sqrt(norm), eps);
  for (std::size_t j = 0; j < m.cols(); ++j) row[j] /= norm;
}

}  // namespace detail

namespace serial {

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    detail::matmul_nt_row(a, b, out, i);
  return out;
}

Matrix matmul_nn(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.rows());
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    detail::matmul_nn_row(a, b, out, i);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  assert(a.rows() == b.rows());
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i)
    detail::matmul_tn_row(a, b, out, i);
  return out;
}

void add_bias_rows(Matrix& m, std::span<const double> bias) {
  assert(bias.size() == m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) detail::add_bias_row(m, bias, i);
}

Vec colsum(const Matrix& m) {
  Vec out(m.cols(), 0.0);
  for (std::size_t j = 0; j < m.cols(); ++j) detail::colsum_col(m, out, j);
  return out;
}

void tanh_inplace(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) detail::tanh_row(m, i);
}

Matrix tanh_backward(const Matrix& activation, const Matrix& grad) {
  assert(activation.rows() == grad.rows() && activation.cols() == grad.cols());
  Matrix out(grad.rows(), grad.cols());
  for (std::size_t i = 0; i < grad.rows(); ++i)
    detail::tanh_backward_row(activation, grad, out, i);
  return out;
}

void softmax_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) detail::softmax_row(m, i);
}

Matrix pairwise_euclidean(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    detail::euclidean_row(a, b, out, i);
  return out;
}

Matrix pairwise_cosine(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) detail::cosine_row(a, b, out, i);
  return out;
}

void l2_normalize_rows(Matrix& m, double eps) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    detail::l2_normalize_row(m, eps, i);
}

}  // namespace serial

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  const std::int64_t n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::matmul_nt_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix matmul_nn(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.rows());
  Matrix out(a.rows(), b.cols());
  const std::int64_t n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::matmul_nn_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  assert(a.rows() == b.rows());
  Matrix out(a.cols(), b.cols());
  const std::int64_t n = static_cast<std::int64_t>(a.cols());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::matmul_tn_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

void add_bias_rows(Matrix& m, std::span<const double> bias) {
  assert(bias.size() == m.cols());
  const std::int64_t n = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::add_bias_row(m, bias, static_cast<std::size_t>(i));
}

Vec colsum(const Matrix& m) {
  Vec out(m.cols(), 0.0);
  const std::int64_t n = static_cast<std::int64_t>(m.cols());
#pragma omp parallel for schedule(static)
  for (std::int64_t j = 0; j < n; ++j)
    detail::colsum_col(m, out, static_cast<std::size_t>(j));
  return out;
}

void tanh_inplace(Matrix& m) {
  const std::int64_t n = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::tanh_row(m, static_cast<std::size_t>(i));
}

Matrix tanh_backward(const Matrix& activation, const Matrix& grad) {
  assert(activation.rows() == grad.rows() && activation.cols() == grad.cols());
  Matrix out(grad.rows(), grad.cols());
  const std::int64_t n = static_cast<std::int64_t>(grad.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::tanh_backward_row(activation, grad, out,
                              static_cast<std::size_t>(i));
  return out;
}

void softmax_rows(Matrix& m) {
  const std::int64_t n = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::softmax_row(m, static_cast<std::size_t>(i));
}

Matrix pairwise_euclidean(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  const std::int64_t n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::euclidean_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix pairwise_cosine(const Matrix& a, const Matrix& b) {
  assert(a.cols() == b.cols());
  Matrix out(a.rows(), b.rows());
  const std::int64_t n = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::cosine_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

void l2_normalize_rows(Matrix& m, double eps) {
  const std::int64_t n = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    detail::l2_normalize_row(m, eps, static_cast<std::size_t>(i));
}

Vec tree_sum_rows(const Matrix& m) {
  assert(m.rows() > 0);
  const std::size_t d = m.cols();
  std::vector<Vec> level(m.rows(), Vec(d));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto row = m.row(i);
    std::copy(row.begin(), row.end(), level[i].begin());
  }
  while (level.size() > 1) {
    std::vector<Vec> next((level.size() + 1) / 2, Vec(d));
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
      for (std::size_t j = 0; j < d; ++j)
        next[i / 2][j] = level[i][j] + level[i + 1][j];
    }
    if (level.size() % 2 == 1) next.back() = level.back();
    level = std::move(next);
  }
  return level[0];
}

}  // namespace cmil::kernels

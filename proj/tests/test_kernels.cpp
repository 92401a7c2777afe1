#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "cmil/kernels.hpp"
#include "cmil/rng.hpp"
#include "testutil.hpp"

using namespace cmil;
namespace k = cmil::kernels;

namespace {

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("omp kernels match the serial reference bitwise") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.bounded(40);
    const std::size_t kk = 1 + rng.bounded(40);
    const std::size_t n = 1 + rng.bounded(40);
    const Matrix a = testutil::random_matrix(m, kk, rng);
    const Matrix b = testutil::random_matrix(n, kk, rng);
    const Matrix bn = testutil::random_matrix(kk, n, rng);
    const Matrix at = testutil::random_matrix(kk, m, rng);

    CHECK(bitwise_equal(k::matmul_nt(a, b), k::serial::matmul_nt(a, b)));
    CHECK(bitwise_equal(k::matmul_nn(a, bn), k::serial::matmul_nn(a, bn)));
    CHECK(bitwise_equal(k::matmul_tn(at, bn), k::serial::matmul_tn(at, bn)));

    Matrix s1 = a, s2 = a;
    Vec bias(kk);
    for (auto& x : bias) x = rng.gaussian();
    k::add_bias_rows(s1, bias);
    k::serial::add_bias_rows(s2, bias);
    CHECK(bitwise_equal(s1, s2));

    CHECK(k::colsum(a) == k::serial::colsum(a));

    Matrix t1 = a, t2 = a;
    k::tanh_inplace(t1);
    k::serial::tanh_inplace(t2);
    CHECK(bitwise_equal(t1, t2));

    const Matrix g = testutil::random_matrix(m, kk, rng);
    CHECK(bitwise_equal(k::tanh_backward(t1, g),
                        k::serial::tanh_backward(t2, g)));

    Matrix sm1 = a, sm2 = a;
    k::softmax_rows(sm1);
    k::serial::softmax_rows(sm2);
    CHECK(bitwise_equal(sm1, sm2));

    CHECK(bitwise_equal(k::pairwise_euclidean(a, b),
                        k::serial::pairwise_euclidean(a, b)));
    CHECK(bitwise_equal(k::pairwise_cosine(a, b),
                        k::serial::pairwise_cosine(a, b)));

    Matrix n1 = a, n2 = a;
    k::l2_normalize_rows(n1);
    k::serial::l2_normalize_rows(n2);
    CHECK(bitwise_equal(n1, n2));
  }
}

TEST_CASE("matmul_nt basic value") {
  Matrix a(2, 3);
  double av[] = {1, 2, 3, 4, 5, 6};
  std::copy(av, av + 6, a.data());
  Matrix b(2, 3);
  double bv[] = {1, 0, 0, 0, 1, 0};
  std::copy(bv, bv + 6, b.data());
  const Matrix c = k::matmul_nt(a, b);
  CHECK(c(0, 0) == 1.0);
  CHECK(c(0, 1) == 2.0);
  CHECK(c(1, 0) == 4.0);
  CHECK(c(1, 1) == 5.0);
}

TEST_CASE("softmax rows are a probability simplex") {
  Rng rng(7);
  Matrix m = testutil::random_matrix(6, 9, rng, 10.0);
  k::softmax_rows(m);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      CHECK(m(i, j) > 0.0);
      sum += m(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("pairwise distances: hand values and zero-vector convention") {
  Matrix a(1, 2);
  a(0, 0) = 0.0;
  a(0, 1) = 0.0;
  Matrix b(1, 2);
  b(0, 0) = 3.0;
  b(0, 1) = 4.0;
  CHECK(k::pairwise_euclidean(a, b)(0, 0) == doctest::Approx(5.0));
  // cosine with the zero vector: defined as 1
  CHECK(k::pairwise_cosine(a, b)(0, 0) == 1.0);
}

TEST_CASE("tree_sum_rows is permutation-stable to 1e-12") {
  Rng rng(11);
  const Matrix m = testutil::random_matrix(13, 5, rng);
  const Vec base = k::tree_sum_rows(m);
  std::vector<std::size_t> perm(m.rows());
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 50; ++t) {
    rng.shuffle(perm);
    Matrix shuffled(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
      shuffled.set_row(i, m.row(perm[i]));
    const Vec sum = k::tree_sum_rows(shuffled);
    for (std::size_t j = 0; j < sum.size(); ++j)
      CHECK(std::abs(sum[j] - base[j]) <= 1e-12);
  }
}

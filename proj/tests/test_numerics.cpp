#include <doctest.h>

#include <cmath>

#include "kwash/error.hpp"
#include "kwash/numerics.hpp"
#include "support.hpp"

using namespace kwash;
using namespace kwash::numerics;
using namespace kwash::testing;

TEST_SUITE("numerics") {

TEST_CASE("matrix products agree with Eigen") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(9), k = 1 + rng.index(9), n = 1 + rng.index(9);
    const Matrix a = random_matrix(rng, m, k);
    const Matrix b = random_matrix(rng, k, n);
    const Matrix bt = random_matrix(rng, n, k);
    const Matrix at = random_matrix(rng, k, m);
    CHECK(rel_diff(to_eigen(matmul(a, b)), to_eigen(a) * to_eigen(b)) < 1e-12);
    CHECK(rel_diff(to_eigen(matmul_nt(a, bt)), to_eigen(a) * to_eigen(bt).transpose()) < 1e-12);
    CHECK(rel_diff(to_eigen(matmul_tn(at, b)), to_eigen(at).transpose() * to_eigen(b)) < 1e-12);
    CHECK(to_eigen(transpose(a)) == to_eigen(a).transpose());
  }
}

TEST_CASE("trace, frobenius and hconcat") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(trace(a) == 5.0);
  CHECK(frobenius_sq(a) == 30.0);
  const Matrix h = hconcat(a, Matrix::from_rows({{5}, {6}}));
  CHECK(h.cols() == 3);
  CHECK(h(1, 2) == 6.0);
  CHECK_THROWS_AS(hconcat(a, Matrix(3, 1)), Error);
}

TEST_CASE("matrix rejects non-finite data and wrong sizes") {
  CHECK_THROWS_AS(Matrix(2, 2, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Matrix(1, 2, {1, std::nan("")}), Error);
}

TEST_CASE("symmetric PSD validation") {
  CHECK_NOTHROW(SymmetricPSD(Matrix::from_rows({{2, 1}, {1, 2}})));
  CHECK_THROWS_AS(SymmetricPSD(Matrix::from_rows({{1, 2}, {0, 1}})), Error);
  CHECK_THROWS_AS(SymmetricPSD(Matrix::from_rows({{1, 0}, {0, -1}})), Error);
  CHECK_THROWS_AS(SymmetricPSD(Matrix(2, 3)), Error);
}

TEST_CASE("cholesky solves match Eigen LLT") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(12);
    const Matrix g = random_matrix(rng, n, n + 3);
    Matrix a = matmul_nt(g, g);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += 0.1;
    const Cholesky chol(a);
    const Matrix b = random_matrix(rng, n, 3);
    const EMat ea = to_eigen(a);
    const EMat x = ea.llt().solve(to_eigen(b));
    CHECK(rel_diff(to_eigen(chol.solve(b)), x) < 1e-9);
    const Matrix br = random_matrix(rng, 4, n);
    const EMat xr = ea.llt().solve(to_eigen(br).transpose()).transpose();
    CHECK(rel_diff(to_eigen(chol.solve_right(br)), xr) < 1e-9);
    CHECK(rel_diff(to_eigen(matmul_nt(chol.lower(), chol.lower())), ea) < 1e-12);
  }
}

TEST_CASE("cholesky rejects indefinite input") {
  CHECK_THROWS_AS(Cholesky(Matrix::from_rows({{1, 2}, {2, 1}})), Error);
}

TEST_CASE("least squares fit matches the normal equations") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d2 = 1 + rng.index(16), d1 = 1 + rng.index(8);
    const std::size_t n = d2 + rng.index(16);
    const Matrix k = random_matrix(rng, d2, n);
    const Matrix v = random_matrix(rng, d1, n);
    const double ridge = trial % 2 ? 0.0 : 0.3;
    const EMat ek = to_eigen(k);
    const EMat gram = ek * ek.transpose() + ridge * EMat::Identity(d2, d2);
    const EMat w = gram.ldlt().solve(ek * to_eigen(v).transpose()).transpose();
    CHECK(rel_diff(to_eigen(least_squares_fit(k, v, ridge)), w) < 1e-8);
  }
}

TEST_CASE("least squares fit reports singular systems") {
  const Matrix k(3, 2, {1, 0, 0, 1, 0, 0});  // rank 2 in 3 dims
  const Matrix v(1, 2, {1, 1});
  CHECK_THROWS_AS(least_squares_fit(k, v, 0.0), Error);
  CHECK_NOTHROW(least_squares_fit(k, v, 1e-3));
}

TEST_CASE("top generalized eigenpair matches Eigen") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.index(10);
    const Matrix ga = random_matrix(rng, n, 3);
    const Matrix gb = random_matrix(rng, n, 2 * n);
    Matrix a = matmul_nt(ga, ga), b = matmul_nt(gb, gb);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        a(j, i) = a(i, j);
        b(j, i) = b(i, j);
      }
    }
    const auto pair = top_generalized_eigenpair(SymmetricPSD(a), SymmetricPSD(b), 0.0);
    Eigen::GeneralizedSelfAdjointEigenSolver<EMat> es(to_eigen(a), to_eigen(b));
    const double expected = es.eigenvalues().maxCoeff();
    CHECK(std::abs(pair.value - expected) <= 1e-7 * expected);
    // A·v = λ·B·v for the returned direction.
    const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(pair.vector.data(), n);
    const Eigen::VectorXd r = to_eigen(a) * v - pair.value * to_eigen(b) * v;
    CHECK(r.norm() <= 1e-5 * (to_eigen(a) * v).norm());
  }
}

TEST_CASE("generalized eigenpair of a zero numerator is zero") {
  const auto pair = top_generalized_eigenpair(SymmetricPSD(Matrix(3, 3)),
                                              SymmetricPSD(Matrix::identity(3)), 0.0);
  CHECK(pair.value == doctest::Approx(0.0));
}

}  // TEST_SUITE

#include <doctest.h>

#include <vector>

#include "kwash/kernels.hpp"
#include "support.hpp"

using namespace kwash;
namespace ks = kwash::kernels::serial;
namespace kp = kwash::kernels::parallel;

namespace {

std::vector<double> randn(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Straight triple loop over explicit index formulas.
double at_nt(const std::vector<double>& a, const std::vector<double>& b, std::size_t i,
             std::size_t j, std::size_t k) {
  double s = 0.0;
  for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
  return s;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("serial and parallel kernels agree on all three layouts") {
  Rng rng(5);
  // Sizes on both sides of the parallel threshold.
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 80, 96}, {130, 7, 300}};
  for (const auto& s : shapes) {
    const std::size_t m = s[0], n = s[1], k = s[2];
    const auto a = randn(rng, m * k), b_nt = randn(rng, n * k), b_nn = randn(rng, k * n),
               a_tn = randn(rng, k * m);
    for (bool acc : {false, true}) {
      auto c0 = randn(rng, m * n);
      auto c1 = c0;
      ks::gemm_nt(a, b_nt, c0, m, n, k, acc);
      kp::gemm_nt(a, b_nt, c1, m, n, k, acc);
      for (std::size_t i = 0; i < m * n; ++i) CHECK(c0[i] == doctest::Approx(c1[i]).epsilon(1e-12));
      c0 = randn(rng, m * n);
      c1 = c0;
      ks::gemm_nn(a, b_nn, c0, m, n, k, acc);
      kp::gemm_nn(a, b_nn, c1, m, n, k, acc);
      for (std::size_t i = 0; i < m * n; ++i) CHECK(c0[i] == doctest::Approx(c1[i]).epsilon(1e-12));
      c0 = randn(rng, m * n);
      c1 = c0;
      ks::gemm_tn(a_tn, b_nn, c0, m, n, k, acc);
      kp::gemm_tn(a_tn, b_nn, c1, m, n, k, acc);
      for (std::size_t i = 0; i < m * n; ++i) CHECK(c0[i] == doctest::Approx(c1[i]).epsilon(1e-12));
    }
    CHECK(ks::dot(a, a) == doctest::Approx(kp::dot(a, a)).epsilon(1e-12));
  }
}

TEST_CASE("serial gemm_nt matches the index formula") {
  Rng rng(6);
  const std::size_t m = 4, n = 3, k = 5;
  const auto a = randn(rng, m * k), b = randn(rng, n * k);
  std::vector<double> c(m * n, 1.0);
  ks::gemm_nt(a, b, c, m, n, k, true);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(c[i * n + j] == doctest::Approx(1.0 + at_nt(a, b, i, j, k)).epsilon(1e-14));
    }
  }
}

TEST_CASE("parallel kernels are deterministic") {
  Rng rng(7);
  const std::size_t m = 96, n = 96, k = 96;
  const auto a = randn(rng, m * k), b = randn(rng, n * k);
  std::vector<double> c1(m * n), c2(m * n);
  kp::gemm_nt(a, b, c1, m, n, k, false);
  kp::gemm_nt(a, b, c2, m, n, k, false);
  CHECK(c1 == c2);
  CHECK(kernels::max_threads() >= 1);
}

}  // TEST_SUITE

#include "kwash/kernels.hpp"

#include <omp.h>

#include <algorithm>

namespace kwash::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace serial {

void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

}  // namespace serial

namespace parallel {

namespace {

inline double simd_dot(const double* x, const double* y, std::size_t len) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (std::size_t p = 0; p < len; ++p) s += x[p] * y[p];
  return s;
}

inline void simd_axpy(double alpha, const double* x, double* y,
                      std::size_t len) {
#pragma omp simd
  for (std::size_t p = 0; p < len; ++p) y[p] += alpha * x[p];
}

inline bool worth_threading(std::size_t m, std::size_t n, std::size_t k) {
  return m > 1 && m * n * k >= kParallelWorkThreshold &&
         !omp_in_parallel();
}

}  // namespace

void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const auto sm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (worth_threading(m, n, k))
  for (std::ptrdiff_t si = 0; si < sm; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const double* ai = pa + i * k;
    double* ci = pc + i * n;
    std::size_t j = 0;
    // Four columns per pass: independent accumulators and one load of ai.
    for (; j + 4 <= n; j += 4) {
      const double* b0 = pb + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (std::size_t p = 0; p < k; ++p) {
        s0 += ai[p] * b0[p];
        s1 += ai[p] * b1[p];
        s2 += ai[p] * b2[p];
        s3 += ai[p] * b3[p];
      }
      if (accumulate) {
        ci[j] += s0;
        ci[j + 1] += s1;
        ci[j + 2] += s2;
        ci[j + 3] += s3;
      } else {
        ci[j] = s0;
        ci[j + 1] = s1;
        ci[j + 2] = s2;
        ci[j + 3] = s3;
      }
    }
    for (; j < n; ++j) {
      const double s = simd_dot(ai, pb + j * k, k);
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const auto sm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (worth_threading(m, n, k))
  for (std::ptrdiff_t si = 0; si < sm; ++si) {
    const auto i = static_cast<std::size_t>(si);
    double* ci = pc + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double alpha = ai[p];
      if (alpha != 0.0) simd_axpy(alpha, pb + p * n, ci, n);
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const auto sm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (worth_threading(m, n, k))
  for (std::ptrdiff_t si = 0; si < sm; ++si) {
    const auto i = static_cast<std::size_t>(si);
    double* ci = pc + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double alpha = pa[p * m + i];
      if (alpha != 0.0) simd_axpy(alpha, pb + p * n, ci, n);
    }
  }
}

double dot(std::span<const double> x, std::span<const double> y) {
  return simd_dot(x.data(), y.data(), x.size());
}

}  // namespace parallel

}  // namespace kwash::kernels

#pragma once

// Dense row-major GEMM-style kernels used by the linear-algebra layer and the
// transformer forward/backward passes.
//
// Two implementations share one signature set:
//   kernels::serial   plain triple loops, kept as the reference for tests
//   kernels::parallel OpenMP row-parallel loops with SIMD inner products
//
// Every output element of the parallel kernels is produced by one thread with
// a fixed summation order, so results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace kwash::kernels {

// Shapes are given as (rows, cols) of the row-major operands.
//   gemm_nt: C[m×n] (+)= A[m×k] · B[n×k]ᵀ
//   gemm_nn: C[m×n] (+)= A[m×k] · B[k×n]
//   gemm_tn: C[m×n] (+)= A[k×m]ᵀ · B[k×n]
// When `accumulate` is false C is overwritten.

namespace serial {
void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
double dot(std::span<const double> x, std::span<const double> y);
}  // namespace serial

namespace parallel {
void gemm_nt(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
void gemm_nn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b,
             std::span<double> c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
double dot(std::span<const double> x, std::span<const double> y);
}  // namespace parallel

// Work (m·n·k multiply-adds) below which the parallel kernels stay on the
// calling thread.
inline constexpr std::size_t kParallelWorkThreshold = 1u << 16;

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace kwash::kernels

// Serial reference kernels against the OpenMP kernels on transformer-sized
// shapes: T×D activations times D×D, F×D and V×D weights.

#include <benchmark/benchmark.h>

#include <vector>

#include "kwash/kernels.hpp"
#include "kwash/random.hpp"

namespace {

namespace ks = kwash::kernels::serial;
namespace kp = kwash::kernels::parallel;

using Gemm = void (*)(std::span<const double>, std::span<const double>, std::span<double>,
                      std::size_t, std::size_t, std::size_t, bool);

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  kwash::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <Gemm F>
void BM_gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  const auto a = filled(m * k, 1), b = filled(n * k, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    F(a, b, c, m, n, k, false);
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * k));
  state.counters["threads"] = kwash::kernels::max_threads();
}

template <double (*F)(std::span<const double>, std::span<const double>)>
void BM_dot(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = filled(n, 3), y = filled(n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(F(x, y));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({32, 64, 64});     // attention projections
  b->Args({32, 256, 64});    // W_in
  b->Args({32, 64, 256});    // W_out
  b->Args({32, 900, 64});    // LM head
  b->Args({256, 256, 256});  // covariance-sized
}

BENCHMARK(BM_gemm<ks::gemm_nt>)->Name("serial/gemm_nt")->Apply(shapes);
BENCHMARK(BM_gemm<kp::gemm_nt>)->Name("parallel/gemm_nt")->Apply(shapes);
BENCHMARK(BM_gemm<ks::gemm_nn>)->Name("serial/gemm_nn")->Apply(shapes);
BENCHMARK(BM_gemm<kp::gemm_nn>)->Name("parallel/gemm_nn")->Apply(shapes);
BENCHMARK(BM_gemm<ks::gemm_tn>)->Name("serial/gemm_tn")->Apply(shapes);
BENCHMARK(BM_gemm<kp::gemm_tn>)->Name("parallel/gemm_tn")->Apply(shapes);
BENCHMARK(BM_dot<ks::dot>)->Name("serial/dot")->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_dot<kp::dot>)->Name("parallel/dot")->Arg(1 << 12)->Arg(1 << 16);

}  // namespace

BENCHMARK_MAIN();

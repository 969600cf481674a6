#include <benchmark/benchmark.h>

#include <vector>

#include "cram/kernels.hpp"
#include "cram/rng.hpp"

namespace {

void fill(std::vector<double>& v, cram::Rng& rng) {
    for (double& x : v) x = rng.normal();
}

// The training step is dominated by (rows x d) x (d x d) products with
// rows ~ batch * seq_len and d the model width.
void bench_mm_nn(benchmark::State& state) {
    std::size_t m = static_cast<std::size_t>(state.range(0));
    std::size_t k = static_cast<std::size_t>(state.range(1));
    std::size_t n = static_cast<std::size_t>(state.range(2));
    cram::Rng rng(1);
    std::vector<double> a(m * k), b(k * n), c(m * n, 0.0);
    fill(a, rng);
    fill(b, rng);
    for (auto _ : state) {
        cram::kern::mm_nn(a.data(), b.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * m * k * n);
}

void bench_mm_nt(benchmark::State& state) {
    std::size_t m = static_cast<std::size_t>(state.range(0));
    std::size_t k = static_cast<std::size_t>(state.range(1));
    std::size_t n = static_cast<std::size_t>(state.range(2));
    cram::Rng rng(2);
    std::vector<double> a(m * k), b(n * k), c(m * n, 0.0);
    fill(a, rng);
    fill(b, rng);
    for (auto _ : state) {
        cram::kern::mm_nt(a.data(), b.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * m * k * n);
}

void bench_mm_tn(benchmark::State& state) {
    std::size_t m = static_cast<std::size_t>(state.range(0));
    std::size_t k = static_cast<std::size_t>(state.range(1));
    std::size_t n = static_cast<std::size_t>(state.range(2));
    cram::Rng rng(3);
    std::vector<double> a(k * m), b(k * n), c(m * n, 0.0);
    fill(a, rng);
    fill(b, rng);
    for (auto _ : state) {
        cram::kern::mm_tn(a.data(), b.data(), c.data(), m, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 2 * m * k * n);
}

}  // namespace

BENCHMARK(bench_mm_nn)->Args({2048, 64, 64})->Args({2048, 64, 128})->Args({256, 64, 64});
BENCHMARK(bench_mm_nt)->Args({2048, 64, 64})->Args({2048, 128, 64});
BENCHMARK(bench_mm_tn)->Args({64, 2048, 64})->Args({128, 2048, 64});

BENCHMARK_MAIN();

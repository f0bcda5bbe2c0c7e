// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/rng.hpp"
#include "cmdskel/tensor.hpp"

using namespace cmdskel;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

// Encoder-shaped GEMMs: input projection, recurrent step, similarity matrix.
void BM_GemmInputProjection(benchmark::State& state) {
    set_compute_threads(static_cast<int>(state.range(0)));
    Tensor a = randn({4096, 150}, 1), b = randn({150, 192}, 2), c({4096, 192});
    for (auto _ : state) {
        gemm_nn(a.data(), b.data(), c.data(), 4096, 150, 192, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2ll * 4096 * 150 * 192);
    set_compute_threads(0);
}
BENCHMARK(BM_GemmInputProjection)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_GemmRecurrentStep(benchmark::State& state) {
    set_compute_threads(1);
    Tensor a = randn({64, 64}, 3), b = randn({64, 192}, 4), c({64, 192});
    for (auto _ : state) {
        gemm_nn(a.data(), b.data(), c.data(), 64, 64, 192, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2ll * 64 * 64 * 192);
    set_compute_threads(0);
}
BENCHMARK(BM_GemmRecurrentStep);

void BM_SimilarityMatrix(benchmark::State& state) {
    Tensor q = randn({64, 32}, 5), bank = randn({512, 32}, 6);
    for (auto _ : state) {
        Tensor sims = matmul_nt_val(q, bank);
        benchmark::DoNotOptimize(sims.data());
    }
    state.SetItemsProcessed(state.iterations() * 2ll * 64 * 512 * 32);
}
BENCHMARK(BM_SimilarityMatrix);

void BM_TopK(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int k = static_cast<int>(state.range(1));
    Tensor sims = randn({64, n}, 7);
    for (auto _ : state) {
        auto [vals, idx] = topk_rows(sims, k);
        benchmark::DoNotOptimize(vals.data());
        benchmark::DoNotOptimize(idx.idx.data());
    }
}
BENCHMARK(BM_TopK)->Args({512, 32})->Args({16384, 8192})->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();

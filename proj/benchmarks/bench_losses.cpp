// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "cmdskel/cmd.hpp"
#include "cmdskel/rng.hpp"
#include "cmdskel/scl.hpp"

using namespace cmdskel;

namespace {

Tensor unit_rows(int rows, int dim, uint64_t seed) {
    Tensor t({rows, dim});
    Rng rng(seed);
    for (int i = 0; i < rows; ++i) {
        double norm2 = 0.0;
        for (int j = 0; j < dim; ++j) {
            t.at(i, j) = rng.normal();
            norm2 += t.at(i, j) * t.at(i, j);
        }
        for (int j = 0; j < dim; ++j) t.at(i, j) /= std::sqrt(norm2);
    }
    return t;
}

void BM_InfoNCE(benchmark::State& state) {
    const int batch = 64, dim = 32, bank_size = static_cast<int>(state.range(0));
    MemoryBank bank(bank_size, dim);
    bank.enqueue(unit_rows(bank_size, dim, 1));
    Tensor z_q = unit_rows(batch, dim, 2);
    Tensor z_k = unit_rows(batch, dim, 3);
    for (auto _ : state) {
        Tape tape;
        Var q = tape.leaf(z_q);
        Var loss = info_nce(q, z_k, bank, 0.07);
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.grad(q).data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_InfoNCE)->Arg(512)->Arg(16384)->Unit(benchmark::kMicrosecond);

void BM_CmdPairLoss(benchmark::State& state) {
    const int batch = 64, dim = 32;
    const int bank_size = static_cast<int>(state.range(0));
    const int k = static_cast<int>(state.range(1));
    MemoryBank bank_a(bank_size, dim), bank_b(bank_size, dim);
    bank_a.enqueue(unit_rows(bank_size, dim, 4));
    bank_b.enqueue(unit_rows(bank_size, dim, 5));
    Tensor zqa = unit_rows(batch, dim, 6), zka = unit_rows(batch, dim, 7);
    Tensor zqb = unit_rows(batch, dim, 8), zkb = unit_rows(batch, dim, 9);
    CmdConfig cfg;
    cfg.k = k;
    for (auto _ : state) {
        Tape tape;
        Var qa = tape.leaf(zqa);
        Var qb = tape.leaf(zqb);
        ModalityView a{&qa, &zka, &bank_a};
        ModalityView b{&qb, &zkb, &bank_b};
        Var loss = cmd_pair_loss(a, b, cfg);
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.grad(qa).data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_CmdPairLoss)->Args({512, 32})->Args({16384, 8192})->Unit(benchmark::kMicrosecond);

void BM_MomentumUpdate(benchmark::State& state) {
    EncoderConfig cfg;
    cfg.input_dim = 150;
    cfg.hidden_dim = 64;
    cfg.embedding_dim = 32;
    EncoderPair pair = make_encoder_pair(cfg, 10, 0.999);
    for (auto _ : state) {
        momentum_update(pair);
        benchmark::DoNotOptimize(pair.key.proj_w.data());
    }
}
BENCHMARK(BM_MomentumUpdate)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();

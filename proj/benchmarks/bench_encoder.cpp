// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "cmdskel/encoder.hpp"
#include "cmdskel/rng.hpp"

using namespace cmdskel;

namespace {

struct Setup {
    EncoderConfig cfg;
    EncoderParams params;
    Tensor input;
    int batch = 64;
    int time_steps = 64;

    Setup() {
        cfg.input_dim = 150;  // 2 actors x 25 joints x 3
        cfg.hidden_dim = 64;
        cfg.embedding_dim = 32;
        params = init_encoder(cfg, 1);
        input = Tensor({batch * time_steps, cfg.input_dim});
        Rng rng(2);
        for (int64_t i = 0; i < input.size(); ++i) input[i] = rng.normal();
    }
};

void BM_EncoderForwardEval(benchmark::State& state) {
    set_compute_threads(static_cast<int>(state.range(0)));
    Setup s;
    for (auto _ : state) {
        Tensor z = encode_values(s.params, s.input, s.batch, s.time_steps, {false, false});
        benchmark::DoNotOptimize(z.data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
    set_compute_threads(0);
}
BENCHMARK(BM_EncoderForwardEval)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_EncoderForwardBackward(benchmark::State& state) {
    set_compute_threads(static_cast<int>(state.range(0)));
    set_gru_fp32_storage(state.range(1) != 0);
    Setup s;
    for (auto _ : state) {
        Tape tape;
        BoundEncoder bound = bind_trainable(tape, s.params);
        Var z = encode(bound, s.params, constant(s.input), s.batch, s.time_steps, {true, false});
        Var loss = mean_all(z);
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.grad(bound.proj_w).data());
    }
    state.SetItemsProcessed(state.iterations() * s.batch);
    set_gru_fp32_storage(false);
    set_compute_threads(0);
}
BENCHMARK(BM_EncoderForwardBackward)
    ->Args({1, 0})
    ->Args({2, 0})
    ->Args({2, 1})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

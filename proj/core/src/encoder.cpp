// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/encoder.hpp"

#include <cmath>

#include "cmdskel/rng.hpp"

namespace cmdskel {

PoolMode parse_pool_mode(const std::string& s) {
    if (s == "mean") return PoolMode::kMean;
    if (s == "max") return PoolMode::kMax;
    if (s == "last") return PoolMode::kLast;
    throw ValueError("unknown pooling mode '" + s + "' (expected mean|max|last)");
}

std::string to_string(PoolMode m) {
    switch (m) {
        case PoolMode::kMean: return "mean";
        case PoolMode::kMax: return "max";
        case PoolMode::kLast: return "last";
    }
    return "mean";
}

void EncoderConfig::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || embedding_dim < 1 || num_layers < 1) {
        throw ValueError("encoder dimensions must all be >= 1");
    }
}

size_t EncoderParams::trainable_count() const {
    size_t n = 0;
    for_each_trainable([&](const std::string&, const Tensor&) { ++n; });
    return n;
}

namespace {

Tensor uniform_tensor(std::vector<int> shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

GruDirectionParams init_direction(int in_dim, int hidden, double bound, Rng& rng) {
    GruDirectionParams p;
    p.w_ih = uniform_tensor({in_dim, 3 * hidden}, bound, rng);
    p.b_ih = Tensor({3 * hidden});
    p.w_hh = uniform_tensor({hidden, 3 * hidden}, bound, rng);
    p.b_hh = Tensor({3 * hidden});
    return p;
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x656e63u));
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));

    EncoderParams p;
    p.cfg = cfg;
    p.bn_gamma = Tensor({cfg.input_dim}, 1.0);
    p.bn_beta = Tensor({cfg.input_dim});
    p.bn_running_mean = Tensor({cfg.input_dim});
    p.bn_running_var = Tensor({cfg.input_dim}, 1.0);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const int in_dim = (l == 0) ? cfg.input_dim : 2 * cfg.hidden_dim;
        GruLayerParams layer;
        layer.fwd = init_direction(in_dim, cfg.hidden_dim, bound, rng);
        layer.bwd = init_direction(in_dim, cfg.hidden_dim, bound, rng);
        p.layers.push_back(std::move(layer));
    }
    p.proj_w = uniform_tensor({2 * cfg.hidden_dim, cfg.embedding_dim}, bound, rng);
    p.proj_b = Tensor({cfg.embedding_dim});
    return p;
}

EncoderParams copy_params(const EncoderParams& src) { return src; }

BoundEncoder bind_trainable(Tape& tape, const EncoderParams& params) {
    BoundEncoder b;
    b.cfg = &params.cfg;
    b.bn_gamma = tape.leaf(params.bn_gamma);
    b.bn_beta = tape.leaf(params.bn_beta);
    for (const GruLayerParams& l : params.layers) {
        BoundEncoder::Layer bl;
        bl.fwd = {tape.leaf(l.fwd.w_ih), tape.leaf(l.fwd.b_ih), tape.leaf(l.fwd.w_hh),
                  tape.leaf(l.fwd.b_hh)};
        bl.bwd = {tape.leaf(l.bwd.w_ih), tape.leaf(l.bwd.b_ih), tape.leaf(l.bwd.w_hh),
                  tape.leaf(l.bwd.b_hh)};
        b.layers.push_back(std::move(bl));
    }
    b.proj_w = tape.leaf(params.proj_w);
    b.proj_b = tape.leaf(params.proj_b);
    return b;
}

BoundEncoder bind_constant(const EncoderParams& params) {
    BoundEncoder b;
    b.cfg = &params.cfg;
    b.bn_gamma = constant(params.bn_gamma);
    b.bn_beta = constant(params.bn_beta);
    for (const GruLayerParams& l : params.layers) {
        BoundEncoder::Layer bl;
        bl.fwd = {constant(l.fwd.w_ih), constant(l.fwd.b_ih), constant(l.fwd.w_hh),
                  constant(l.fwd.b_hh)};
        bl.bwd = {constant(l.bwd.w_ih), constant(l.bwd.b_ih), constant(l.bwd.w_hh),
                  constant(l.bwd.b_hh)};
        b.layers.push_back(std::move(bl));
    }
    b.proj_w = constant(params.proj_w);
    b.proj_b = constant(params.proj_b);
    return b;
}

Var encode(const BoundEncoder& enc, EncoderParams& owner, const Var& input, int batch,
           int time_steps, const EncodeOptions& opts) {
    const EncoderConfig& cfg = *enc.cfg;
    const Tensor& X = input.value();
    if (X.rank() != 2 || X.rows() != batch * time_steps || X.cols() != cfg.input_dim) {
        throw ShapeError("encode: input " + shape_str(X) + " does not match B=" +
                         std::to_string(batch) + ", T=" + std::to_string(time_steps) +
                         ", input_dim=" + std::to_string(cfg.input_dim));
    }
    if (!all_finite(X)) throw ValueError("encode: non-finite input batch");
    if (time_steps < 1) throw ValueError("encode: T must be >= 1");

    Var x;
    if (opts.train) {
        BnBatchStats stats;
        x = bn_train(input, enc.bn_gamma, enc.bn_beta, &stats);
        if (opts.update_running_stats) {
            constexpr double kBnMomentum = 0.9;
            for (int64_t i = 0; i < owner.bn_running_mean.size(); ++i) {
                owner.bn_running_mean[i] =
                    kBnMomentum * owner.bn_running_mean[i] + (1.0 - kBnMomentum) * stats.mean[i];
                owner.bn_running_var[i] =
                    kBnMomentum * owner.bn_running_var[i] + (1.0 - kBnMomentum) * stats.var[i];
            }
        }
    } else {
        x = bn_eval(input, enc.bn_gamma, enc.bn_beta, owner.bn_running_mean, owner.bn_running_var);
    }

    for (const BoundEncoder::Layer& l : enc.layers) {
        const GruDirectionVars fwd{l.fwd.w_ih, l.fwd.b_ih, l.fwd.w_hh, l.fwd.b_hh};
        const GruDirectionVars bwd{l.bwd.w_ih, l.bwd.b_ih, l.bwd.w_hh, l.bwd.b_hh};
        x = bigru_layer(x, fwd, bwd, batch, time_steps);
    }

    Var pooled;
    switch (cfg.pooling) {
        case PoolMode::kMean: pooled = mean_time_blocks(x, time_steps); break;
        case PoolMode::kMax: pooled = max_time_blocks(x, time_steps); break;
        case PoolMode::kLast: pooled = bigru_final_block(x, time_steps); break;
    }

    Var proj = add_rowvec(matmul(pooled, enc.proj_w), enc.proj_b);
    return l2_normalize_rows(proj);
}

Tensor encode_values(EncoderParams& params, const Tensor& input, int batch, int time_steps,
                     const EncodeOptions& opts) {
    BoundEncoder enc = bind_constant(params);
    return encode(enc, params, constant(input), batch, time_steps, opts).value();
}

std::vector<Tensor> collect_grads(const Tape& tape, const BoundEncoder& enc) {
    std::vector<Tensor> grads;
    enc.for_each([&](const Var& v) { grads.push_back(tape.grad(v)); });
    return grads;
}

}  // namespace cmdskel

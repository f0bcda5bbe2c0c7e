// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/tensor.hpp"

namespace cmdskel {

enum class PoolMode { kMean, kMax, kLast };

PoolMode parse_pool_mode(const std::string& s);
std::string to_string(PoolMode m);

// Sequence encoder: input batch norm -> stacked bidirectional GRU layers ->
// temporal pooling -> linear projection -> L2 normalization. Embeddings are
// unit-norm so dot products downstream are cosine similarities.
struct EncoderConfig {
    int input_dim = 150;  // 2 actors * J joints * 3 coords per frame
    int hidden_dim = 1024;
    int embedding_dim = 128;
    int num_layers = 3;
    PoolMode pooling = PoolMode::kMean;

    void validate() const;
};

struct GruDirectionParams {
    Tensor w_ih, b_ih, w_hh, b_hh;
};

struct GruLayerParams {
    GruDirectionParams fwd, bwd;
};

struct EncoderParams {
    EncoderConfig cfg;
    Tensor bn_gamma, bn_beta;
    Tensor bn_running_mean, bn_running_var;  // updated in train mode, never trained
    std::vector<GruLayerParams> layers;
    Tensor proj_w, proj_b;

    // Trainable tensors in a fixed order shared by gradient collection, the
    // optimizer, momentum updates and checkpoints.
    template <class F>
    void for_each_trainable(F&& f) {
        f("bn_gamma", bn_gamma);
        f("bn_beta", bn_beta);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "gru" + std::to_string(l);
            f(p + "_fwd_w_ih", layers[l].fwd.w_ih);
            f(p + "_fwd_b_ih", layers[l].fwd.b_ih);
            f(p + "_fwd_w_hh", layers[l].fwd.w_hh);
            f(p + "_fwd_b_hh", layers[l].fwd.b_hh);
            f(p + "_bwd_w_ih", layers[l].bwd.w_ih);
            f(p + "_bwd_b_ih", layers[l].bwd.b_ih);
            f(p + "_bwd_w_hh", layers[l].bwd.w_hh);
            f(p + "_bwd_b_hh", layers[l].bwd.b_hh);
        }
        f("proj_w", proj_w);
        f("proj_b", proj_b);
    }

    template <class F>
    void for_each_trainable(F&& f) const {
        const_cast<EncoderParams*>(this)->for_each_trainable(
            [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
    }

    // Trainable tensors plus batch-norm running statistics.
    template <class F>
    void for_each_state(F&& f) {
        for_each_trainable(f);
        f("bn_running_mean", bn_running_mean);
        f("bn_running_var", bn_running_var);
    }

    size_t trainable_count() const;
};

// Uniform init in +-1/sqrt(hidden_dim) for weight matrices, zero biases,
// identity batch norm. Deterministic in the seed.
EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed);

// Deep value copy (the starting point of the momentum-updated key encoder).
EncoderParams copy_params(const EncoderParams& src);

// Parameters bound to a tape (trainable) or wrapped as constants (teacher /
// evaluation). Order of for_each matches EncoderParams::for_each_trainable.
struct BoundEncoder {
    struct Dir {
        Var w_ih, b_ih, w_hh, b_hh;
    };
    struct Layer {
        Dir fwd, bwd;
    };
    Var bn_gamma, bn_beta;
    std::vector<Layer> layers;
    Var proj_w, proj_b;
    const EncoderConfig* cfg = nullptr;

    template <class F>
    void for_each(F&& f) const {
        f(bn_gamma);
        f(bn_beta);
        for (const Layer& l : layers) {
            f(l.fwd.w_ih);
            f(l.fwd.b_ih);
            f(l.fwd.w_hh);
            f(l.fwd.b_hh);
            f(l.bwd.w_ih);
            f(l.bwd.b_ih);
            f(l.bwd.w_hh);
            f(l.bwd.b_hh);
        }
        f(proj_w);
        f(proj_b);
    }
};

BoundEncoder bind_trainable(Tape& tape, const EncoderParams& params);
BoundEncoder bind_constant(const EncoderParams& params);

struct EncodeOptions {
    bool train = false;                 // batch statistics in the BN layer
    bool update_running_stats = false;  // fold batch stats into the running ones
};

// input is (B*T x input_dim) in time-major blocks; returns (B x embedding_dim)
// with unit-norm rows. `owner` supplies (and in train mode receives) the batch
// norm running statistics.
Var encode(const BoundEncoder& enc, EncoderParams& owner, const Var& input, int batch,
           int time_steps, const EncodeOptions& opts);

// Value-only convenience used for the key encoder and evaluation.
Tensor encode_values(EncoderParams& params, const Tensor& input, int batch, int time_steps,
                     const EncodeOptions& opts);

// Gradients in for_each_trainable order after Tape::backward.
std::vector<Tensor> collect_grads(const Tape& tape, const BoundEncoder& enc);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/scl.hpp"

namespace cmdskel {

EncoderPair make_encoder_pair(const EncoderConfig& cfg, uint64_t seed, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ValueError("momentum coefficient must lie in [0, 1]");
    EncoderPair pair;
    pair.query = init_encoder(cfg, seed);
    pair.key = copy_params(pair.query);
    pair.alpha = alpha;
    return pair;
}

void momentum_update(EncoderParams& key, const EncoderParams& query, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ValueError("momentum coefficient must lie in [0, 1]");
    std::vector<const Tensor*> q;
    query.for_each_trainable([&](const std::string&, const Tensor& t) { q.push_back(&t); });
    size_t i = 0;
    key.for_each_trainable([&](const std::string& name, Tensor& t) {
        const Tensor& src = *q[i++];
        if (!t.same_shape(src)) throw ShapeError("momentum_update: shape mismatch at " + name);
        for (int64_t e = 0; e < t.size(); ++e) t[e] = alpha * t[e] + (1.0 - alpha) * src[e];
    });
}

Var info_nce(const Var& z_q, const Tensor& z_k, const MemoryBank& bank, double tau_c) {
    if (!(tau_c > 0.0)) throw ValueError("info_nce: temperature must be > 0");
    const Tensor& q = z_q.value();
    if (q.rank() != 2 || !q.same_shape(z_k)) {
        throw ShapeError("info_nce: z_q " + shape_str(q) + " vs z_k " + shape_str(z_k));
    }
    if (bank.filled() < 1) throw UsageError("info_nce: memory bank holds no negatives yet");
    if (bank.dim() != q.cols()) {
        throw ShapeError("info_nce: embedding dim " + std::to_string(q.cols()) + " vs bank dim " +
                         std::to_string(bank.dim()));
    }

    const double inv_tau = 1.0 / tau_c;
    Var l_pos = rows_dot(z_q, constant(z_k));                              // (B)
    Var l_neg = matmul_nt(z_q, constant(bank.filled_entries()));           // (B x filled)
    Var logits = concat_cols(reshaped(l_pos, {q.rows(), 1}), l_neg);       // positive in column 0
    Var lse = row_logsumexp(scale(logits, inv_tau));
    return mean_all(sub(lse, scale(l_pos, inv_tau)));
}

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cmdskel/autodiff.hpp"
#include "cmdskel/encoder.hpp"
#include "cmdskel/memory_bank.hpp"

namespace cmdskel {

// Query/key encoder pair for single-modal contrastive learning. The query is
// trained by gradient, the key only ever moves by the momentum rule
// key <- alpha * key + (1 - alpha) * query.
struct EncoderPair {
    EncoderParams query;
    EncoderParams key;
    double alpha = 0.999;
};

EncoderPair make_encoder_pair(const EncoderConfig& cfg, uint64_t seed, double alpha);

void momentum_update(EncoderParams& key, const EncoderParams& query, double alpha);
inline void momentum_update(EncoderPair& pair) { momentum_update(pair.key, pair.query, pair.alpha); }

// InfoNCE over one positive and the bank's negatives:
//   mean_i -log exp(q_i.k_i/tau) / (exp(q_i.k_i/tau) + sum_j exp(q_i.m_j/tau))
// z_k and the bank enter as constants, so no gradient can reach the key side.
// While the bank is only partially filled, the filled prefix serves as the
// negative set.
Var info_nce(const Var& z_q, const Tensor& z_k, const MemoryBank& bank, double tau_c);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/memory_bank.hpp"

namespace cmdskel {

// Neighboring similarity distribution of an embedding against its top-K bank
// anchors: p_i = softmax(logits / tau) with logits in descending order for
// the teacher side. tau == 0 selects exact one-hot mode (ties break toward
// the smallest bank index).
struct SimilarityDistribution {
    std::vector<int32_t> anchor_indices;
    Tensor logits;  // (K)
    double temperature = 0.0;
    Tensor probs;  // (K), sums to 1
};

struct CmdConfig {
    int k = 8192;
    double tau_t = 0.05;  // teacher; 0 means one-hot
    double tau_s = 0.1;   // student

    void validate() const;
};

// Batched teacher distributions: probs and anchor indices per row of z_k.
struct TeacherBatch {
    Tensor probs;  // (B x K)
    IndexMatrix indices;
};

SimilarityDistribution teacher_distribution(const Tensor& z_k, const MemoryBank& bank, int k,
                                            double tau_t);
SimilarityDistribution student_distribution(const Tensor& z_q, const MemoryBank& bank,
                                            const std::vector<int32_t>& anchor_indices,
                                            double tau_s);

TeacherBatch teacher_batch(const Tensor& z_k, const MemoryBank& bank, int k, double tau_t);

// KL(teacher || student) with batch-mean reduction; the student gathers its
// own bank similarities at the teacher's anchor indices.
Var cmd_direction_loss(const TeacherBatch& teacher, const Var& z_q_student,
                       const MemoryBank& student_bank, double tau_s);

// One modality's view of the current mini-batch inside the losses.
struct ModalityView {
    const Var* z_q = nullptr;        // query embeddings, gradient flows here
    const Tensor* z_k = nullptr;     // key embeddings (constant)
    const MemoryBank* bank = nullptr;
};

// Bidirectional distillation between two modalities (both directions summed).
Var cmd_pair_loss(const ModalityView& mod_a, const ModalityView& mod_b, const CmdConfig& cfg);

// Unweighted sum of all contrastive and distillation terms.
Var total_loss(std::span<const Var> scl_losses, std::span<const Var> cmd_losses);

// Positive-mining reference: the plain contrastive loss plus a second
// positive at the mined bank index u (one index per batch row).
Var cpm_loss(const Var& z_q, const Tensor& z_k, const MemoryBank& bank,
             const std::vector<int32_t>& mined, double tau_c);

// Value of the mined positive term alone, optionally excluding the key
// embedding from the denominator. Computed directly from the definition.
double cpm_mined_term_value(const Tensor& z_q_row, const Tensor& z_k_row, const MemoryBank& bank,
                            int mined, double tau, bool include_key_in_denominator);

// Checks that with tau_t = 0 and K = N the one-directional distillation loss
// collapses to -log softmax_u(student logits / tau_s) at the teacher argmax
// u, and that this equals the mined positive term once the key embedding is
// excluded from its denominator. Run with tau_t > 0 as a negative control.
struct DegeneracyReport {
    bool matches_closed_form = false;
    bool matches_mined_term = false;
    double dev_closed_form = 0.0;
    double dev_mined_term = 0.0;
    double teacher_mass_at_argmax = 0.0;
    int mined_index = -1;
};

DegeneracyReport degeneracy_check(const Tensor& z_q_b, const Tensor& z_k_b, const Tensor& z_k_a,
                                  const MemoryBank& bank_a, const MemoryBank& bank_b, double tau_t,
                                  double tau_s, double tol = 1e-10);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/cmd.hpp"

#include <cmath>

namespace cmdskel {

void CmdConfig::validate() const {
    if (k < 1) throw ValueError("cmd: K must be >= 1");
    if (tau_t < 0.0) throw ValueError("cmd: teacher temperature must be >= 0");
    if (!(tau_s > 0.0)) throw ValueError("cmd: student temperature must be > 0");
}

namespace {

void require_full(const MemoryBank& bank, const char* what) {
    if (!bank.full()) {
        throw UsageError(std::string(what) + ": memory bank filled " + std::to_string(bank.filled()) +
                         "/" + std::to_string(bank.capacity()) + ", distribution needs a full bank");
    }
}

// Softmax of v / tau into out, or exact one-hot at the first (largest) entry
// when tau == 0. v is sorted descending, so ties already resolve toward the
// smallest bank index.
void anchor_probs(const double* v, int k, double tau, double* out) {
    if (tau == 0.0) {
        for (int i = 0; i < k; ++i) out[i] = 0.0;
        out[0] = 1.0;
        return;
    }
    double mx = v[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        out[i] = std::exp((v[i] - mx) / tau);
        sum += out[i];
    }
    for (int i = 0; i < k; ++i) out[i] /= sum;
}

}  // namespace

SimilarityDistribution teacher_distribution(const Tensor& z_k, const MemoryBank& bank, int k,
                                            double tau_t) {
    if (z_k.rank() != 1) throw ShapeError("teacher_distribution: expected a vector embedding");
    if (tau_t < 0.0) throw ValueError("teacher_distribution: temperature must be >= 0");
    require_full(bank, "teacher_distribution");
    if (k > bank.filled()) {
        throw UsageError("teacher_distribution: K=" + std::to_string(k) + " exceeds filled " +
                         std::to_string(bank.filled()));
    }
    Tensor sims = matmul_nt_val(z_k.reshaped({1, z_k.dim(0)}), bank.entries());
    auto [vals, idx] = topk(sims.reshaped({bank.capacity()}), k);

    SimilarityDistribution d;
    d.anchor_indices = std::move(idx);
    d.temperature = tau_t;
    d.probs = Tensor({k});
    anchor_probs(vals.data(), k, tau_t, d.probs.data());
    d.logits = std::move(vals);
    return d;
}

SimilarityDistribution student_distribution(const Tensor& z_q, const MemoryBank& bank,
                                            const std::vector<int32_t>& anchor_indices,
                                            double tau_s) {
    if (z_q.rank() != 1) throw ShapeError("student_distribution: expected a vector embedding");
    if (!(tau_s > 0.0)) throw ValueError("student_distribution: temperature must be > 0");
    require_full(bank, "student_distribution");
    const int k = static_cast<int>(anchor_indices.size());
    if (k < 1) throw UsageError("student_distribution: empty anchor set");
    SimilarityDistribution d;
    d.anchor_indices = anchor_indices;
    d.temperature = tau_s;
    d.logits = Tensor({k});
    for (int i = 0; i < k; ++i) {
        const int32_t a = anchor_indices[static_cast<size_t>(i)];
        if (a < 0 || a >= bank.capacity()) {
            throw UsageError("student_distribution: anchor index " + std::to_string(a) +
                             " out of range");
        }
        double s = 0.0;
        const double* m = bank.entries().data() + static_cast<size_t>(a) * bank.dim();
        for (int c = 0; c < bank.dim(); ++c) s += z_q[c] * m[c];
        d.logits[i] = s;
    }
    d.probs = Tensor({k});
    anchor_probs(d.logits.data(), k, tau_s, d.probs.data());
    return d;
}

TeacherBatch teacher_batch(const Tensor& z_k, const MemoryBank& bank, int k, double tau_t) {
    if (z_k.rank() != 2) throw ShapeError("teacher_batch: expected (B x d) keys");
    if (tau_t < 0.0) throw ValueError("teacher_batch: temperature must be >= 0");
    require_full(bank, "teacher_batch");
    if (k > bank.filled()) {
        throw UsageError("teacher_batch: K=" + std::to_string(k) + " exceeds filled " +
                         std::to_string(bank.filled()));
    }
    Tensor sims = matmul_nt_val(z_k, bank.entries());
    auto [vals, idx] = topk_rows(sims, k);
    TeacherBatch t;
    t.indices = std::move(idx);
    t.probs = Tensor({z_k.rows(), k});
    for (int i = 0; i < z_k.rows(); ++i) {
        anchor_probs(vals.data() + static_cast<size_t>(i) * k, k, tau_t,
                     t.probs.data() + static_cast<size_t>(i) * k);
    }
    return t;
}

Var cmd_direction_loss(const TeacherBatch& teacher, const Var& z_q_student,
                       const MemoryBank& student_bank, double tau_s) {
    require_full(student_bank, "cmd_direction_loss");
    const Tensor& q = z_q_student.value();
    if (q.rows() != teacher.indices.rows) {
        throw UsageError("cmd_direction_loss: teacher and student batch sizes disagree");
    }
    Var l_q = matmul_nt(z_q_student, constant(student_bank.entries()));
    Var gathered = gather_cols(l_q, teacher.indices);
    Var log_q = row_log_softmax(gathered, tau_s);
    return kl_batchmean(teacher.probs, log_q);
}

Var cmd_pair_loss(const ModalityView& mod_a, const ModalityView& mod_b, const CmdConfig& cfg) {
    cfg.validate();
    if (!mod_a.z_q || !mod_a.z_k || !mod_a.bank || !mod_b.z_q || !mod_b.z_k || !mod_b.bank) {
        throw UsageError("cmd_pair_loss: incomplete modality view");
    }
    if (mod_a.z_q->value().rows() != mod_b.z_q->value().rows()) {
        throw UsageError("cmd_pair_loss: batch sizes disagree across modalities");
    }
    TeacherBatch teach_a = teacher_batch(*mod_a.z_k, *mod_a.bank, cfg.k, cfg.tau_t);
    TeacherBatch teach_b = teacher_batch(*mod_b.z_k, *mod_b.bank, cfg.k, cfg.tau_t);
    Var a_to_b = cmd_direction_loss(teach_a, *mod_b.z_q, *mod_b.bank, cfg.tau_s);
    Var b_to_a = cmd_direction_loss(teach_b, *mod_a.z_q, *mod_a.bank, cfg.tau_s);
    return add(a_to_b, b_to_a);
}

Var total_loss(std::span<const Var> scl_losses, std::span<const Var> cmd_losses) {
    if (scl_losses.empty()) throw UsageError("total_loss: at least one modality is required");
    Var total = scl_losses[0];
    for (size_t i = 1; i < scl_losses.size(); ++i) total = add(total, scl_losses[i]);
    for (const Var& t : cmd_losses) total = add(total, t);
    return total;
}

Var cpm_loss(const Var& z_q, const Tensor& z_k, const MemoryBank& bank,
             const std::vector<int32_t>& mined, double tau_c) {
    if (!(tau_c > 0.0)) throw ValueError("cpm_loss: temperature must be > 0");
    require_full(bank, "cpm_loss");
    const Tensor& q = z_q.value();
    if (static_cast<int>(mined.size()) != q.rows()) {
        throw UsageError("cpm_loss: one mined index per batch row required");
    }
    for (int32_t u : mined) {
        if (u < 0 || u >= bank.capacity()) {
            throw UsageError("cpm_loss: mined index " + std::to_string(u) + " out of range");
        }
    }
    const double inv_tau = 1.0 / tau_c;
    Var l_pos = rows_dot(z_q, constant(z_k));
    Var l_neg = matmul_nt(z_q, constant(bank.entries()));
    Var lse = row_logsumexp(scale(concat_cols(reshaped(l_pos, {q.rows(), 1}), l_neg), inv_tau));
    Var scl_term = mean_all(sub(lse, scale(l_pos, inv_tau)));
    Var mined_logit = select_cols(l_neg, mined);
    Var mined_term = mean_all(sub(lse, scale(mined_logit, inv_tau)));
    return add(scl_term, mined_term);
}

double cpm_mined_term_value(const Tensor& z_q_row, const Tensor& z_k_row, const MemoryBank& bank,
                            int mined, double tau, bool include_key_in_denominator) {
    if (!(tau > 0.0)) throw ValueError("cpm_mined_term_value: temperature must be > 0");
    require_full(bank, "cpm_mined_term_value");
    if (mined < 0 || mined >= bank.capacity()) throw UsageError("cpm_mined_term_value: bad index");
    const int n = bank.capacity();
    const int d = bank.dim();
    std::vector<double> logits;
    logits.reserve(static_cast<size_t>(n) + 1);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const double* m = bank.entries().data() + static_cast<size_t>(i) * d;
        for (int c = 0; c < d; ++c) s += z_q_row[c] * m[c];
        logits.push_back(s / tau);
    }
    const double mined_logit = logits[static_cast<size_t>(mined)];
    if (include_key_in_denominator) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += z_q_row[c] * z_k_row[c];
        logits.push_back(s / tau);
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return -(mined_logit - mx - std::log(sum));
}

DegeneracyReport degeneracy_check(const Tensor& z_q_b, const Tensor& z_k_b, const Tensor& z_k_a,
                                  const MemoryBank& bank_a, const MemoryBank& bank_b, double tau_t,
                                  double tau_s, double tol) {
    require_full(bank_a, "degeneracy_check");
    require_full(bank_b, "degeneracy_check");
    const int n = bank_a.capacity();
    const int d = z_q_b.dim(0);

    // Route 1: the regular distillation path with K = N.
    TeacherBatch teacher = teacher_batch(z_k_a.reshaped({1, d}), bank_a, n, tau_t);
    Var loss =
        cmd_direction_loss(teacher, constant(z_q_b.reshaped({1, d})), bank_b, tau_s);
    const double machinery = loss.value().item();

    DegeneracyReport rep;
    rep.mined_index = teacher.indices.at(0, 0);  // teacher argmax, smallest index on ties
    rep.teacher_mass_at_argmax = teacher.probs[0];

    // Route 2: -log softmax_u over the student's full bank similarities.
    {
        std::vector<double> logits(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            const double* m = bank_b.entries().data() + static_cast<size_t>(i) * bank_b.dim();
            for (int c = 0; c < d; ++c) s += z_q_b[c] * m[c];
            logits[static_cast<size_t>(i)] = s / tau_s;
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : logits) sum += std::exp(v - mx);
        const double closed = -(logits[static_cast<size_t>(rep.mined_index)] - mx - std::log(sum));
        rep.dev_closed_form = std::abs(machinery - closed);
    }

    // Route 3: the mined positive term with the key excluded from its
    // denominator (the stated point of difference with positive mining).
    const double mined = cpm_mined_term_value(z_q_b, z_k_b, bank_b, rep.mined_index, tau_s,
                                              /*include_key_in_denominator=*/false);
    rep.dev_mined_term = std::abs(machinery - mined);

    rep.matches_closed_form = rep.dev_closed_form <= tol;
    rep.matches_mined_term = rep.dev_mined_term <= tol;
    return rep;
}

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cmdskel/cmd.hpp"
#include "cmdskel/rng.hpp"
#include "cmdskel/scl.hpp"

namespace cmdskel {

namespace {

Tensor random_unit_rows(int rows, int dim, Rng& rng) {
    Tensor t({rows, dim});
    for (int i = 0; i < rows; ++i) {
        double norm2 = 0.0;
        double* row = t.data() + static_cast<size_t>(i) * dim;
        for (int j = 0; j < dim; ++j) {
            row[j] = rng.normal();
            norm2 += row[j] * row[j];
        }
        const double inv = 1.0 / std::sqrt(norm2 + 1e-30);
        for (int j = 0; j < dim; ++j) row[j] *= inv;
    }
    return t;
}

MemoryBank full_bank(int n, int dim, Rng& rng) {
    MemoryBank bank(n, dim);
    bank.enqueue(random_unit_rows(n, dim, rng));
    return bank;
}

// Central finite differences of f at x0, compared against the analytic
// gradient with a guarded relative error.
double fd_max_rel_err(const std::function<double(const Tensor&)>& f, const Tensor& x0,
                      const Tensor& analytic, double h = 1e-5) {
    Tensor x = x0;
    double worst = 0.0;
    for (int64_t i = 0; i < x0.size(); ++i) {
        x[i] = x0[i] + h;
        const double fp = f(x);
        x[i] = x0[i] - h;
        const double fm = f(x);
        x[i] = x0[i];
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

CheckResult check_distributions(uint64_t seed) {
    Rng rng(derive_seed(seed, 1));
    double worst_sum = 0.0, worst_probs = 0.0;
    bool indices_ok = true;
    for (int n : {16, 64, 256, 1024}) {
        Rng bank_rng(derive_seed(seed, 2, static_cast<uint64_t>(n)));
        MemoryBank bank = full_bank(n, 16, bank_rng);
        Tensor z = random_unit_rows(1, 16, rng).reshaped({16});
        for (int k : {1, 8, n}) {
            SimilarityDistribution d = teacher_distribution(z, bank, k, 0.05);
            double sum = 0.0;
            for (int i = 0; i < k; ++i) sum += d.probs[i];
            worst_sum = std::max(worst_sum, std::abs(sum - 1.0));

            // Full-sort oracle over all bank similarities.
            std::vector<std::pair<double, int>> sims;
            for (int i = 0; i < n; ++i) {
                double s = 0.0;
                const double* m = bank.entries().data() + static_cast<size_t>(i) * 16;
                for (int c = 0; c < 16; ++c) s += z[c] * m[c];
                sims.emplace_back(s, i);
            }
            std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (int i = 0; i < k; ++i) {
                if (d.anchor_indices[static_cast<size_t>(i)] != sims[static_cast<size_t>(i)].second) {
                    indices_ok = false;
                }
            }
            // Direct-formula probabilities.
            double mx = d.logits[0];
            double denom = 0.0;
            for (int i = 0; i < k; ++i) denom += std::exp((d.logits[i] - mx) / 0.05);
            for (int i = 0; i < k; ++i) {
                const double expect = std::exp((d.logits[i] - mx) / 0.05) / denom;
                worst_probs = std::max(worst_probs, std::abs(d.probs[i] - expect));
            }
        }
    }
    const bool ok = indices_ok && worst_sum <= 1e-6 && worst_probs <= 1e-12;
    return {"similarity-distributions",
            ok,
            "max |sum-1| = " + fmt(worst_sum) + ", max prob dev = " + fmt(worst_probs) +
                (indices_ok ? ", indices match sort oracle" : ", INDEX MISMATCH")};
}

CheckResult check_queue(uint64_t seed) {
    Rng rng(derive_seed(seed, 3));
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
        const int cap = 4 + static_cast<int>(rng.below(60));
        const int dim = 3;
        MemoryBank bank(cap, dim);
        std::vector<std::vector<double>> oracle;  // plain list, trimmed from the front
        int64_t next_id = 0;
        for (int step = 0; step < 50; ++step) {
            const int b = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cap)));
            Tensor batch({b, dim});
            std::vector<int64_t> src;
            for (int i = 0; i < b; ++i) {
                for (int c = 0; c < dim; ++c) batch.at(i, c) = rng.uniform();
                src.push_back(next_id++);
                oracle.push_back({batch.at(i, 0), batch.at(i, 1), batch.at(i, 2)});
            }
            while (static_cast<int>(oracle.size()) > cap) oracle.erase(oracle.begin());
            bank.enqueue(batch, src);
            // The bank holds the oracle's entries, matched as sets of rows in
            // FIFO age order via the cursor.
            if (bank.filled() != static_cast<int>(oracle.size()) &&
                !(bank.full() && static_cast<int>(oracle.size()) == cap)) {
                ok = false;
                break;
            }
            const int filled = bank.filled();
            for (int age = 0; age < filled; ++age) {
                // oldest surviving row is at cursor when full, index 0 otherwise
                int slot;
                if (bank.full()) {
                    slot = (bank.cursor() + age) % cap;
                } else {
                    slot = age;
                }
                const double* row = bank.entries().data() + static_cast<size_t>(slot) * dim;
                const std::vector<double>& expect = oracle[static_cast<size_t>(age)];
                for (int c = 0; c < dim; ++c) {
                    if (row[c] != expect[static_cast<size_t>(c)]) ok = false;
                }
            }
        }
    }
    return {"queue-fifo-semantics", ok,
            ok ? "randomized enqueues match the ring-buffer oracle" : "ring-buffer oracle mismatch"};
}

CheckResult check_momentum(uint64_t seed) {
    Rng rng(derive_seed(seed, 4));
    EncoderConfig cfg;
    cfg.input_dim = 12;
    cfg.hidden_dim = 4;
    cfg.embedding_dim = 4;
    double worst = 0.0;
    for (double alpha : {0.0, 1.0, 0.999, 0.5}) {
        EncoderPair pair = make_encoder_pair(cfg, derive_seed(seed, 5), alpha);
        // Give key and query distinct values.
        pair.key.for_each_trainable([&](const std::string&, Tensor& t) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
        });
        EncoderParams old_key = copy_params(pair.key);
        momentum_update(pair);
        std::vector<const Tensor*> q, ok_;
        pair.query.for_each_trainable([&](const std::string&, const Tensor& t) { q.push_back(&t); });
        old_key.for_each_trainable([&](const std::string&, const Tensor& t) { ok_.push_back(&t); });
        size_t ti = 0;
        pair.key.for_each_trainable([&](const std::string&, const Tensor& t) {
            const Tensor& qq = *q[ti];
            const Tensor& kk = *ok_[ti];
            ++ti;
            for (int64_t i = 0; i < t.size(); ++i) {
                const double expect = alpha * kk[i] + (1.0 - alpha) * qq[i];
                worst = std::max(worst, std::abs(t[i] - expect));
            }
        });
    }
    return {"momentum-update", worst <= 1e-12, "max |dev| = " + fmt(worst)};
}

CheckResult check_kl(uint64_t seed) {
    Rng rng(derive_seed(seed, 6));
    double worst_self = 0.0;
    bool nonneg = true;
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 16;
        Tensor p({k}), q({k});
        double sp = 0, sq = 0;
        for (int i = 0; i < k; ++i) {
            p[i] = rng.uniform() + 1e-3;
            q[i] = rng.uniform() + 1e-3;
            sp += p[i];
            sq += q[i];
        }
        for (int i = 0; i < k; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        worst_self = std::max(worst_self, std::abs(kl_div(constant(p), constant(p)).value().item()));
        if (kl_div(constant(p), constant(q)).value().item() < -1e-12) nonneg = false;
    }
    const bool ok = worst_self <= 1e-9 && nonneg;
    return {"kl-divergence", ok, "max |KL(p||p)| = " + fmt(worst_self)};
}

CheckResult check_gradients(uint64_t seed) {
    Rng rng(derive_seed(seed, 7));
    const int b = 4, d = 8, n = 32, k = 8;
    MemoryBank bank_a = full_bank(n, d, rng);
    MemoryBank bank_b = full_bank(n, d, rng);
    Tensor zq_a0 = random_unit_rows(b, d, rng);
    Tensor zq_b0 = random_unit_rows(b, d, rng);
    Tensor zk_a = random_unit_rows(b, d, rng);
    Tensor zk_b = random_unit_rows(b, d, rng);
    CmdConfig cfg;
    cfg.k = k;

    // SCL gradient w.r.t. the query embeddings.
    Tape t1;
    Var zq = t1.leaf(zq_a0);
    Var scl = info_nce(zq, zk_a, bank_a, 0.07);
    t1.backward(scl);
    const double scl_err = fd_max_rel_err(
        [&](const Tensor& x) { return info_nce(constant(x), zk_a, bank_a, 0.07).value().item(); },
        zq_a0, t1.grad(zq));

    // CMD pair gradient w.r.t. one side's query embeddings.
    Tape t2;
    Var zq_b = t2.leaf(zq_b0);
    Var zq_a_const = constant(zq_a0);
    ModalityView va{&zq_a_const, &zk_a, &bank_a};
    ModalityView vb{&zq_b, &zk_b, &bank_b};
    Var pair = cmd_pair_loss(va, vb, cfg);
    t2.backward(pair);
    const double cmd_err = fd_max_rel_err(
        [&](const Tensor& x) {
            Var v = constant(x);
            ModalityView wb{&v, &zk_b, &bank_b};
            return cmd_pair_loss(va, wb, cfg).value().item();
        },
        zq_b0, t2.grad(zq_b));

    const bool ok = scl_err < 1e-4 && cmd_err < 1e-4;
    return {"loss-gradients-vs-finite-differences", ok,
            "rel err: scl = " + fmt(scl_err) + ", cmd = " + fmt(cmd_err)};
}

CheckResult check_degeneracy(uint64_t seed) {
    Rng rng(derive_seed(seed, 8));
    const int n = 24, d = 8;
    double worst_closed = 0.0, worst_mined = 0.0;
    bool control_failed_somewhere = false;
    for (int trial = 0; trial < 100; ++trial) {
        MemoryBank bank_a = full_bank(n, d, rng);
        MemoryBank bank_b = full_bank(n, d, rng);
        Tensor zq_b = random_unit_rows(1, d, rng).reshaped({d});
        Tensor zk_b = random_unit_rows(1, d, rng).reshaped({d});
        Tensor zk_a = random_unit_rows(1, d, rng).reshaped({d});
        DegeneracyReport rep = degeneracy_check(zq_b, zk_b, zk_a, bank_a, bank_b, 0.0, 0.1);
        worst_closed = std::max(worst_closed, rep.dev_closed_form);
        worst_mined = std::max(worst_mined, rep.dev_mined_term);
        // Negative control: a soft teacher must not collapse to the one-hot form.
        DegeneracyReport control = degeneracy_check(zq_b, zk_b, zk_a, bank_a, bank_b, 0.05, 0.1);
        if (!control.matches_closed_form) control_failed_somewhere = true;
    }
    const bool ok = worst_closed <= 1e-10 && worst_mined <= 1e-10 && control_failed_somewhere;
    return {"positive-mining-degeneracy", ok,
            "max dev: closed form = " + fmt(worst_closed) + ", mined term = " + fmt(worst_mined) +
                (control_failed_somewhere ? ", negative control rejects"
                                          : ", NEGATIVE CONTROL DID NOT REJECT")};
}

CheckResult check_topk(uint64_t seed) {
    Rng rng(derive_seed(seed, 9));
    bool ok = true;
    for (int trial = 0; trial < 30 && ok; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(1000));
        Tensor v({n});
        for (int i = 0; i < n; ++i) {
            // Coarse quantization forces duplicate values, exercising ties.
            v[i] = std::floor(rng.uniform() * 8.0);
        }
        for (int k : {1, std::min(8, n), n}) {
            auto [vals, idx] = topk(v, k);
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return v[a] > v[b]; });
            for (int i = 0; i < k; ++i) {
                if (idx[static_cast<size_t>(i)] != order[static_cast<size_t>(i)] ||
                    vals[i] != v[order[static_cast<size_t>(i)]]) {
                    ok = false;
                }
            }
        }
    }
    return {"topk-vs-sort-oracle", ok,
            ok ? "randomized sweep matches, ties break to the smaller index" : "oracle mismatch"};
}

}  // namespace

std::vector<CheckResult> run_self_checks(uint64_t seed) {
    std::vector<CheckResult> out;
    out.push_back(check_distributions(seed));
    out.push_back(check_topk(seed));
    out.push_back(check_queue(seed));
    out.push_back(check_momentum(seed));
    out.push_back(check_kl(seed));
    out.push_back(check_gradients(seed));
    out.push_back(check_degeneracy(seed));
    return out;
}

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <deque>

#include "cmdskel/scl.hpp"
#include "test_helpers.hpp"

using namespace cmdskel;

TEST_SUITE_BEGIN("moco");

TEST_CASE("momentum_update") {
    EncoderConfig cfg;
    cfg.input_dim = 6;
    cfg.hidden_dim = 4;
    cfg.embedding_dim = 3;
    SUBCASE("alpha = 1 leaves the key unchanged") {
        EncoderPair pair = make_encoder_pair(cfg, 1, 1.0);
        pair.query.proj_w[0] += 5.0;
        Tensor before = pair.key.proj_w;
        momentum_update(pair);
        CHECK(testutil::max_abs_diff(before, pair.key.proj_w) == 0.0);
    }
    SUBCASE("alpha = 0 copies the query") {
        EncoderPair pair = make_encoder_pair(cfg, 2, 0.0);
        pair.query.proj_w[0] += 5.0;
        momentum_update(pair);
        CHECK(testutil::max_abs_diff(pair.key.proj_w, pair.query.proj_w) == 0.0);
    }
    SUBCASE("alpha = 0.999 matches element-wise recomputation") {
        EncoderPair pair = make_encoder_pair(cfg, 3, 0.999);
        Rng rng(31);
        pair.key.for_each_trainable([&](const std::string&, Tensor& t) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
        });
        std::vector<Tensor> old_key;
        pair.key.for_each_trainable(
            [&](const std::string&, const Tensor& t) { old_key.push_back(t); });
        momentum_update(pair);
        std::vector<const Tensor*> q;
        pair.query.for_each_trainable([&](const std::string&, const Tensor& t) { q.push_back(&t); });
        size_t i = 0;
        pair.key.for_each_trainable([&](const std::string&, const Tensor& t) {
            for (int64_t e = 0; e < t.size(); ++e) {
                const double expect = 0.999 * old_key[i][e] + 0.001 * (*q[i])[e];
                CHECK(std::abs(t[e] - expect) <= 1e-12);
            }
            ++i;
        });
    }
    SUBCASE("invalid momentum coefficient") {
        CHECK_THROWS_AS(make_encoder_pair(cfg, 4, 1.5), ValueError);
    }
}

TEST_CASE("enqueue") {
    SUBCASE("capacity 4, three batches of 2 keep the last four rows in order") {
        MemoryBank bank(4, 2);
        for (int b = 0; b < 3; ++b) {
            Tensor batch({2, 2});
            batch.at(0, 0) = 2 * b;
            batch.at(1, 0) = 2 * b + 1;
            bank.enqueue(batch);
        }
        CHECK(bank.filled() == 4);
        CHECK(bank.cursor() == 2);
        // Oldest surviving rows are 2 and 3 at slots 2, 3; rows 4, 5 wrapped
        // to slots 0, 1.
        CHECK(bank.entries().at(0, 0) == 4.0);
        CHECK(bank.entries().at(1, 0) == 5.0);
        CHECK(bank.entries().at(2, 0) == 2.0);
        CHECK(bank.entries().at(3, 0) == 3.0);
    }
    SUBCASE("enqueue of exactly N fills and resets the cursor") {
        MemoryBank bank(6, 3);
        bank.enqueue(testutil::random_unit_rows(6, 3, 41));
        CHECK(bank.filled() == 6);
        CHECK(bank.cursor() == 0);
        CHECK(bank.full());
    }
    SUBCASE("randomized sequences match a list-based ring-buffer oracle") {
        Rng rng(42);
        for (int trial = 0; trial < 15; ++trial) {
            const int cap = 2 + static_cast<int>(rng.below(40));
            MemoryBank bank(cap, 1);
            std::deque<double> oracle;
            double next = 0.0;
            for (int step = 0; step < 40; ++step) {
                const int b = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cap)));
                Tensor batch({b, 1});
                for (int i = 0; i < b; ++i) {
                    batch.at(i, 0) = next++;
                    oracle.push_back(batch.at(i, 0));
                }
                while (static_cast<int>(oracle.size()) > cap) oracle.pop_front();
                bank.enqueue(batch);
                REQUIRE(bank.filled() == static_cast<int>(oracle.size()));
                for (int age = 0; age < bank.filled(); ++age) {
                    const int slot = bank.full() ? (bank.cursor() + age) % cap : age;
                    CHECK(bank.entries()[slot] == oracle[static_cast<size_t>(age)]);
                }
            }
        }
    }
    SUBCASE("oversized batch is a parameter error") {
        MemoryBank bank(3, 2);
        CHECK_THROWS_AS(bank.enqueue(Tensor({4, 2})), ValueError);
    }
}

TEST_CASE("info_nce") {
    const int d = 16;
    SUBCASE("aligned positive with orthogonal negatives approaches zero loss") {
        // z_q == z_k == e_0; bank entries orthogonal to it.
        Tensor z({1, d});
        z.at(0, 0) = 1.0;
        MemoryBank bank(32, d);
        Tensor negs({32, d});
        for (int i = 0; i < 32; ++i) negs.at(i, 1 + i % (d - 1)) = 1.0;
        bank.enqueue(negs);
        const double loss = info_nce(constant(z), z, bank, 0.07).value().item();
        // -log(e^{1/tau} / (e^{1/tau} + N)) = log(1 + N e^{-1/tau})
        const double expect = std::log1p(32.0 * std::exp(-1.0 / 0.07));
        CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
        CHECK(loss < 1e-4);
    }
    SUBCASE("matches an (N+1)-way softmax cross-entropy oracle") {
        const int batch = 4, n = 24;
        Tensor z_q = testutil::random_unit_rows(batch, d, 51);
        Tensor z_k = testutil::random_unit_rows(batch, d, 52);
        MemoryBank bank = testutil::full_bank(n, d, 53);
        const double tau = 0.07;
        const double loss = info_nce(constant(z_q), z_k, bank, tau).value().item();
        double expect = 0.0;
        for (int i = 0; i < batch; ++i) {
            std::vector<double> logits;
            double pos = 0.0;
            for (int c = 0; c < d; ++c) pos += z_q.at(i, c) * z_k.at(i, c);
            logits.push_back(pos / tau);
            for (int m = 0; m < n; ++m) {
                double s = 0.0;
                for (int c = 0; c < d; ++c) s += z_q.at(i, c) * bank.entries().at(m, c);
                logits.push_back(s / tau);
            }
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double denom = 0.0;
            for (double v : logits) denom += std::exp(v - mx);
            expect += -(logits[0] - mx - std::log(denom));
        }
        expect /= batch;
        CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("a duplicated positive in the bank matches the same oracle") {
        Tensor z = testutil::random_unit_rows(1, d, 54);
        MemoryBank bank(8, d);
        Tensor rows = testutil::random_unit_rows(8, d, 55);
        for (int c = 0; c < d; ++c) rows.at(3, c) = z.at(0, c);  // duplicate of the positive
        bank.enqueue(rows);
        const double tau = 0.1;
        const double loss = info_nce(constant(z), z, bank, tau).value().item();
        std::vector<double> logits{1.0 / tau};
        for (int m = 0; m < 8; ++m) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += z.at(0, c) * bank.entries().at(m, c);
            logits.push_back(s / tau);
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : logits) denom += std::exp(v - mx);
        CHECK(loss == doctest::Approx(-(logits[0] - mx - std::log(denom))).epsilon(1e-12));
    }
    SUBCASE("gradient w.r.t. z_q matches finite differences") {
        Tensor z_q = testutil::random_unit_rows(4, 8, 56);
        Tensor z_k = testutil::random_unit_rows(4, 8, 57);
        MemoryBank bank = testutil::full_bank(32, 8, 58);
        Tape tape;
        Var q = tape.leaf(z_q);
        Var loss = info_nce(q, z_k, bank, 0.07);
        tape.backward(loss);
        const double err = testutil::fd_max_rel_err(
            [&](const Tensor& t) { return info_nce(constant(t), z_k, bank, 0.07).value().item(); },
            z_q, tape.grad(q));
        CHECK(err < 1e-4);
    }
    SUBCASE("loss decreases as the positive alignment grows") {
        // One-parameter family with fixed negatives: z_q stays put, z_k
        // rotates toward it, so only the positive logit moves.
        MemoryBank bank = testutil::full_bank(16, 2, 59);
        Tensor z_q({1, 2});
        z_q.at(0, 0) = 1.0;
        double prev = 1e300;
        for (double angle = 1.5; angle >= 0.0; angle -= 0.15) {
            Tensor z_k({1, 2});
            z_k.at(0, 0) = std::cos(angle);
            z_k.at(0, 1) = std::sin(angle);
            const double v = info_nce(constant(z_q), z_k, bank, 0.07).value().item();
            CHECK(v < prev);
            CHECK(v >= 0.0);
            prev = v;
        }
    }
    SUBCASE("empty bank is a usage error") {
        MemoryBank bank(8, 4);
        Tensor z = testutil::random_unit_rows(2, 4, 60);
        CHECK_THROWS_AS(info_nce(constant(z), z, bank, 0.07), UsageError);
    }
    SUBCASE("no gradient can reach key-encoder parameters") {
        // Bind key parameters on the tape, run the key encoder recorded, but
        // feed the loss its values only; the leaves must stay at zero.
        EncoderConfig cfg;
        cfg.input_dim = 6;
        cfg.hidden_dim = 4;
        cfg.embedding_dim = 8;
        EncoderPair pair = make_encoder_pair(cfg, 61, 0.999);
        Tensor xq = testutil::random_tensor({4, 6}, 62);
        Tensor xk = testutil::random_tensor({4, 6}, 63);
        MemoryBank bank = testutil::full_bank(16, 8, 64);

        Tape tape;
        BoundEncoder bq = bind_trainable(tape, pair.query);
        BoundEncoder bk = bind_trainable(tape, pair.key);
        Var z_q = encode(bq, pair.query, constant(xq), 2, 2, {true, false});
        Var z_k_var = encode(bk, pair.key, constant(xk), 2, 2, {true, false});
        const Tensor z_k = z_k_var.value();  // the trainer hands values, not vars
        Var loss = info_nce(z_q, z_k, bank, 0.07);
        tape.backward(loss);

        bool query_has_signal = false;
        bq.for_each([&](const Var& v) {
            if (l2_norm(tape.grad(v)) > 0.0) query_has_signal = true;
        });
        CHECK(query_has_signal);
        bk.for_each([&](const Var& v) {
            const Tensor g = tape.grad(v);
            for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
        });
    }
}

TEST_SUITE_END();

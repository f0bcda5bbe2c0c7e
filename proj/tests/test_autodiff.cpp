// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/fastmath.hpp"
#include "test_helpers.hpp"

using namespace cmdskel;

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("sum of squares has gradient 2v") {
    Tensor v0 = testutil::random_tensor({7}, 5);
    Tape tape;
    Var v = tape.leaf(v0);
    Var loss = sum_all(square(v));
    tape.backward(loss);
    Tensor g = tape.grad(v);
    for (int i = 0; i < 7; ++i) CHECK(g[i] == doctest::Approx(2.0 * v0[i]).epsilon(1e-12));
}

TEST_CASE("constant loss leaves all gradients zero") {
    Tape tape;
    Var v = tape.leaf(testutil::random_tensor({4}, 6));
    tape.backward(constant(Tensor::scalar(3.0)));
    Tensor g = tape.grad(v);
    for (int i = 0; i < 4; ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward demands a scalar loss") {
    Tape tape;
    Var v = tape.leaf(testutil::random_tensor({3, 2}, 7));
    CHECK_THROWS_AS(tape.backward(v), UsageError);
}

TEST_CASE("elementary op gradients match finite differences") {
    const Tensor x0 = testutil::random_tensor({3, 4}, 8);
    const Tensor y0 = testutil::random_tensor({3, 4}, 9);

    auto check_unary = [&](const char* name, const std::function<Var(const Var&)>& op,
                           const Tensor& at) {
        CAPTURE(name);
        Tape tape;
        Var x = tape.leaf(at);
        Var loss = sum_all(square(op(x)));
        tape.backward(loss);
        const double err = testutil::fd_max_rel_err(
            [&](const Tensor& t) { return sum_all(square(op(constant(t)))).value().item(); }, at,
            tape.grad(x));
        CHECK(err < 1e-6);
    };

    check_unary("scale", [](const Var& v) { return scale(v, -1.7); }, x0);
    check_unary("slice_cols", [](const Var& v) { return slice_cols(v, 1, 3); }, x0);
    // Unit-norm rows make the plain square-sum constant; weight the output so
    // the loss actually depends on the input direction.
    const Tensor w_norm = testutil::random_tensor({3, 4}, 181);
    check_unary("l2_normalize_rows",
                [&](const Var& v) { return hadamard(l2_normalize_rows(v), constant(w_norm)); }, x0);
    check_unary("row_softmax", [](const Var& v) { return row_softmax(v, 0.4); }, x0);
    check_unary("row_log_softmax", [](const Var& v) { return row_log_softmax(v, 0.25); }, x0);
    check_unary("mean_time_blocks", [](const Var& v) { return mean_time_blocks(v, 3); },
                testutil::random_tensor({9, 4}, 10));
    check_unary("max_time_blocks", [](const Var& v) { return max_time_blocks(v, 3); },
                testutil::random_tensor({9, 4}, 11));
    check_unary("bigru_final_block", [](const Var& v) { return bigru_final_block(v, 3); },
                testutil::random_tensor({9, 4}, 12));
    check_unary("reshaped", [](const Var& v) { return reshaped(v, {4, 3}); }, x0);
    check_unary("row_logsumexp",
                [](const Var& v) { return reshaped(row_logsumexp(v), {3, 1}); }, x0);

    SUBCASE("binary ops") {
        for (const char* which : {"add", "sub", "hadamard", "rows_dot", "add_rowvec"}) {
            CAPTURE(which);
            const std::string op = which;
            auto apply = [&](const Var& a, const Var& b) -> Var {
                if (op == "add") return add(a, b);
                if (op == "sub") return sub(a, b);
                if (op == "hadamard") return hadamard(a, b);
                if (op == "rows_dot") return reshaped(rows_dot(a, b), {3, 1});
                return add_rowvec(a, slice_cols(reshaped(b, {4, 3}), 0, 1) /*unused*/);
            };
            if (op == "add_rowvec") {
                Tensor v0 = testutil::random_tensor({4}, 13);
                Tape tape;
                Var a = tape.leaf(x0);
                Var v = tape.leaf(v0);
                Var loss = sum_all(square(add_rowvec(a, v)));
                tape.backward(loss);
                const double ea = testutil::fd_max_rel_err(
                    [&](const Tensor& t) {
                        return sum_all(square(add_rowvec(constant(t), constant(v0)))).value().item();
                    },
                    x0, tape.grad(a));
                const double ev = testutil::fd_max_rel_err(
                    [&](const Tensor& t) {
                        return sum_all(square(add_rowvec(constant(x0), constant(t)))).value().item();
                    },
                    v0, tape.grad(v));
                CHECK(ea < 1e-6);
                CHECK(ev < 1e-6);
                continue;
            }
            Tape tape;
            Var a = tape.leaf(x0);
            Var b = tape.leaf(y0);
            Var loss = sum_all(square(apply(a, b)));
            tape.backward(loss);
            const double ea = testutil::fd_max_rel_err(
                [&](const Tensor& t) {
                    return sum_all(square(apply(constant(t), constant(y0)))).value().item();
                },
                x0, tape.grad(a));
            const double eb = testutil::fd_max_rel_err(
                [&](const Tensor& t) {
                    return sum_all(square(apply(constant(x0), constant(t)))).value().item();
                },
                y0, tape.grad(b));
            CHECK(ea < 1e-6);
            CHECK(eb < 1e-6);
        }
    }
}

TEST_CASE("matmul gradients match finite differences") {
    const Tensor a0 = testutil::random_tensor({4, 5}, 14);
    const Tensor b0 = testutil::random_tensor({5, 3}, 15);
    Tape tape;
    Var a = tape.leaf(a0);
    Var b = tape.leaf(b0);
    Var loss = sum_all(square(matmul(a, b)));
    tape.backward(loss);
    const double ea = testutil::fd_max_rel_err(
        [&](const Tensor& t) { return sum_all(square(matmul(constant(t), constant(b0)))).value().item(); },
        a0, tape.grad(a));
    const double eb = testutil::fd_max_rel_err(
        [&](const Tensor& t) { return sum_all(square(matmul(constant(a0), constant(t)))).value().item(); },
        b0, tape.grad(b));
    CHECK(ea < 1e-6);
    CHECK(eb < 1e-6);

    const Tensor c0 = testutil::random_tensor({6, 5}, 16);
    Tape t2;
    Var a2 = t2.leaf(a0);
    Var c2 = t2.leaf(c0);
    Var loss2 = sum_all(square(matmul_nt(a2, c2)));
    t2.backward(loss2);
    const double ea2 = testutil::fd_max_rel_err(
        [&](const Tensor& t) {
            return sum_all(square(matmul_nt(constant(t), constant(c0)))).value().item();
        },
        a0, t2.grad(a2));
    const double ec2 = testutil::fd_max_rel_err(
        [&](const Tensor& t) {
            return sum_all(square(matmul_nt(constant(a0), constant(t)))).value().item();
        },
        c0, t2.grad(c2));
    CHECK(ea2 < 1e-6);
    CHECK(ec2 < 1e-6);
}

TEST_CASE("gather and select gradients match finite differences") {
    const Tensor x0 = testutil::random_tensor({4, 6}, 17);
    IndexMatrix idx{4, 3, {5, 0, 2, 1, 1, 3, 4, 4, 4, 0, 5, 2}};
    Tape tape;
    Var x = tape.leaf(x0);
    Var loss = sum_all(square(gather_cols(x, idx)));
    tape.backward(loss);
    const double err = testutil::fd_max_rel_err(
        [&](const Tensor& t) { return sum_all(square(gather_cols(constant(t), idx))).value().item(); },
        x0, tape.grad(x));
    CHECK(err < 1e-6);

    CHECK_THROWS_AS(gather_cols(constant(x0), IndexMatrix{4, 1, {0, 1, 6, 0}}), UsageError);
}

TEST_CASE("kl gradients match finite differences") {
    Tensor p0 = testutil::random_prob_vector(8, 18);
    Tensor q0 = testutil::random_prob_vector(8, 19);
    SUBCASE("gradient flows into q with a constant teacher") {
        Tape tape;
        Var q = tape.leaf(q0);
        // Renormalize inside the graph so wiggled inputs stay distributions.
        Var qn = reshaped(row_softmax(reshaped(q, {1, 8}), 1.0), {8});
        Var loss = kl_div(constant(p0), qn);
        tape.backward(loss);
        const double err = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                Var c = constant(t);
                Var cn = reshaped(row_softmax(reshaped(c, {1, 8}), 1.0), {8});
                return kl_div(constant(p0), cn).value().item();
            },
            q0, tape.grad(q));
        CHECK(err < 1e-6);
    }
    SUBCASE("batchmean variant") {
        Tensor teacher({2, 8});
        for (int i = 0; i < 8; ++i) {
            teacher.at(0, i) = p0[i];
            teacher.at(1, i) = q0[i];
        }
        Tensor s0 = testutil::random_tensor({2, 8}, 20);
        Tape tape;
        Var s = tape.leaf(s0);
        Var loss = kl_batchmean(teacher, row_log_softmax(s, 0.1));
        tape.backward(loss);
        const double err = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return kl_batchmean(teacher, row_log_softmax(constant(t), 0.1)).value().item();
            },
            s0, tape.grad(s));
        CHECK(err < 1e-6);
        // Cross-check the value against per-row kl_div of explicit softmaxes.
        Var probs = row_softmax(constant(s0), 0.1);
        double expect = 0.0;
        for (int r = 0; r < 2; ++r) {
            Tensor pr({8}), qr({8});
            for (int i = 0; i < 8; ++i) {
                pr[i] = teacher.at(r, i);
                qr[i] = probs.value().at(r, i);
            }
            expect += kl_div(constant(pr), constant(qr)).value().item();
        }
        expect /= 2.0;
        CHECK(loss.value().item() == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("batch norm gradients match finite differences") {
    const Tensor x0 = testutil::random_tensor({12, 5}, 21);
    const Tensor g0 = testutil::random_tensor({5}, 22);
    const Tensor b0 = testutil::random_tensor({5}, 23);
    SUBCASE("train mode") {
        // Normalized activations have a constant square-sum per feature, so a
        // fixed random weighting keeps the loss sensitive to x.
        const Tensor w = testutil::random_tensor({12, 5}, 231);
        auto weighted = [&](const Var& y) { return sum_all(hadamard(y, constant(w))); };
        Tape tape;
        Var x = tape.leaf(x0);
        Var g = tape.leaf(g0);
        Var b = tape.leaf(b0);
        Var loss = weighted(bn_train(x, g, b));
        tape.backward(loss);
        const double ex = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return weighted(bn_train(constant(t), constant(g0), constant(b0))).value().item();
            },
            x0, tape.grad(x));
        const double eg = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return weighted(bn_train(constant(x0), constant(t), constant(b0))).value().item();
            },
            g0, tape.grad(g));
        const double eb = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return weighted(bn_train(constant(x0), constant(g0), constant(t))).value().item();
            },
            b0, tape.grad(b));
        CHECK(ex < 1e-5);
        CHECK(eg < 1e-6);
        CHECK(eb < 1e-6);
    }
    SUBCASE("eval mode") {
        Tensor mean = testutil::random_tensor({5}, 24, 0.3);
        Tensor var({5}, 1.3);
        Tape tape;
        Var x = tape.leaf(x0);
        Var loss = sum_all(square(bn_eval(x, constant(g0), constant(b0), mean, var)));
        tape.backward(loss);
        const double err = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return sum_all(
                           square(bn_eval(constant(t), constant(g0), constant(b0), mean, var)))
                    .value()
                    .item();
            },
            x0, tape.grad(x));
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gru direction gradients match finite differences") {
    const int batch = 3, time_steps = 4, in_dim = 5, hidden = 4;
    const Tensor x0 = testutil::random_tensor({batch * time_steps, in_dim}, 25, 0.7);
    const Tensor wih0 = testutil::random_tensor({in_dim, 3 * hidden}, 26, 0.4);
    const Tensor bih0 = testutil::random_tensor({3 * hidden}, 27, 0.2);
    const Tensor whh0 = testutil::random_tensor({hidden, 3 * hidden}, 28, 0.4);
    const Tensor bhh0 = testutil::random_tensor({3 * hidden}, 29, 0.2);

    for (bool reverse : {false, true}) {
        CAPTURE(reverse);
        Tape tape;
        Var x = tape.leaf(x0);
        Var wih = tape.leaf(wih0);
        Var bih = tape.leaf(bih0);
        Var whh = tape.leaf(whh0);
        Var bhh = tape.leaf(bhh0);
        Var loss = sum_all(
            square(gru_direction(x, wih, bih, whh, bhh, batch, time_steps, reverse)));
        tape.backward(loss);

        auto value_at = [&](const Tensor& xx, const Tensor& wi, const Tensor& bi, const Tensor& wh,
                            const Tensor& bh) {
            return sum_all(square(gru_direction(constant(xx), constant(wi), constant(bi),
                                                constant(wh), constant(bh), batch, time_steps,
                                                reverse)))
                .value()
                .item();
        };
        CHECK(testutil::fd_max_rel_err(
                  [&](const Tensor& t) { return value_at(t, wih0, bih0, whh0, bhh0); }, x0,
                  tape.grad(x)) < 1e-5);
        CHECK(testutil::fd_max_rel_err(
                  [&](const Tensor& t) { return value_at(x0, t, bih0, whh0, bhh0); }, wih0,
                  tape.grad(wih)) < 1e-5);
        CHECK(testutil::fd_max_rel_err(
                  [&](const Tensor& t) { return value_at(x0, wih0, t, whh0, bhh0); }, bih0,
                  tape.grad(bih)) < 1e-5);
        CHECK(testutil::fd_max_rel_err(
                  [&](const Tensor& t) { return value_at(x0, wih0, bih0, t, bhh0); }, whh0,
                  tape.grad(whh)) < 1e-5);
        CHECK(testutil::fd_max_rel_err(
                  [&](const Tensor& t) { return value_at(x0, wih0, bih0, whh0, t); }, bhh0,
                  tape.grad(bhh)) < 1e-5);
    }
}

TEST_CASE("bidirectional layer equals two directions side by side") {
    const int batch = 3, time_steps = 5, in_dim = 6, hidden = 4;
    const Tensor x0 = testutil::random_tensor({batch * time_steps, in_dim}, 30, 0.7);
    Tensor wf = testutil::random_tensor({in_dim, 3 * hidden}, 31, 0.4);
    Tensor bf = testutil::random_tensor({3 * hidden}, 32, 0.2);
    Tensor whf = testutil::random_tensor({hidden, 3 * hidden}, 33, 0.4);
    Tensor bhf = testutil::random_tensor({3 * hidden}, 34, 0.2);
    Tensor wb = testutil::random_tensor({in_dim, 3 * hidden}, 35, 0.4);
    Tensor bb = testutil::random_tensor({3 * hidden}, 36, 0.2);
    Tensor whb = testutil::random_tensor({hidden, 3 * hidden}, 37, 0.4);
    Tensor bhb = testutil::random_tensor({3 * hidden}, 38, 0.2);

    GruDirectionVars fwd{constant(wf), constant(bf), constant(whf), constant(bhf)};
    GruDirectionVars bwd{constant(wb), constant(bb), constant(whb), constant(bhb)};
    Tensor fused = bigru_layer(constant(x0), fwd, bwd, batch, time_steps).value();
    Tensor f = gru_direction(constant(x0), fwd.w_ih, fwd.b_ih, fwd.w_hh, fwd.b_hh, batch,
                             time_steps, false)
                   .value();
    Tensor b = gru_direction(constant(x0), bwd.w_ih, bwd.b_ih, bwd.w_hh, bwd.b_hh, batch,
                             time_steps, true)
                   .value();
    Tensor cat = concat_cols(constant(f), constant(b)).value();
    CHECK(testutil::max_abs_diff(fused, cat) < 1e-12);

    SUBCASE("gradients match finite differences through the fused layer") {
        Tape tape;
        Var x = tape.leaf(x0);
        GruDirectionVars fv{tape.leaf(wf), tape.leaf(bf), tape.leaf(whf), tape.leaf(bhf)};
        GruDirectionVars bv{tape.leaf(wb), tape.leaf(bb), tape.leaf(whb), tape.leaf(bhb)};
        Var loss = sum_all(square(bigru_layer(x, fv, bv, batch, time_steps)));
        tape.backward(loss);
        const double ex = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                return sum_all(square(bigru_layer(constant(t), fwd, bwd, batch, time_steps)))
                    .value()
                    .item();
            },
            x0, tape.grad(x));
        CHECK(ex < 1e-5);
        const double ew = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                GruDirectionVars f2{constant(t), constant(bf), constant(whf), constant(bhf)};
                return sum_all(square(bigru_layer(constant(x0), f2, bwd, batch, time_steps)))
                    .value()
                    .item();
            },
            wf, tape.grad(fv.w_ih));
        CHECK(ew < 1e-5);
        const double ewb = testutil::fd_max_rel_err(
            [&](const Tensor& t) {
                GruDirectionVars b2{constant(t), constant(bb), constant(whb), constant(bhb)};
                return sum_all(square(bigru_layer(constant(x0), fwd, b2, batch, time_steps)))
                    .value()
                    .item();
        },
            wb, tape.grad(bv.w_ih));
        CHECK(ewb < 1e-5);
    }
}

TEST_CASE("reduced-precision storage tracks the exact mode closely") {
    const int batch = 2, time_steps = 3, in_dim = 4, hidden = 3;
    const Tensor x0 = testutil::random_tensor({batch * time_steps, in_dim}, 40, 0.5);
    const Tensor wih0 = testutil::random_tensor({in_dim, 3 * hidden}, 41, 0.4);
    const Tensor bih0 = testutil::random_tensor({3 * hidden}, 42, 0.2);
    const Tensor whh0 = testutil::random_tensor({hidden, 3 * hidden}, 43, 0.4);
    const Tensor bhh0 = testutil::random_tensor({3 * hidden}, 44, 0.2);
    Tensor exact = gru_direction(constant(x0), constant(wih0), constant(bih0), constant(whh0),
                                 constant(bhh0), batch, time_steps, false)
                       .value();
    REQUIRE_FALSE(gru_fp32_storage());
    set_gru_fp32_storage(true);
    Tensor reduced = gru_direction(constant(x0), constant(wih0), constant(bih0), constant(whh0),
                                   constant(bhh0), batch, time_steps, false)
                         .value();
    set_gru_fp32_storage(false);
    CHECK(testutil::max_abs_diff(exact, reduced) < 1e-5);
    CHECK(testutil::max_abs_diff(exact, reduced) > 0.0);  // it is a different mode
}

TEST_CASE("gru cell step matches the gate-equation oracle") {
    const int batch = 2, in_dim = 3, hidden = 4;
    Tensor x = testutil::random_tensor({batch, in_dim}, 45, 0.8);
    Tensor h_prev = testutil::random_tensor({batch, hidden}, 46, 0.8);
    Tensor wih = testutil::random_tensor({in_dim, 3 * hidden}, 47, 0.5);
    Tensor bih = testutil::random_tensor({3 * hidden}, 48, 0.3);
    Tensor whh = testutil::random_tensor({hidden, 3 * hidden}, 49, 0.5);
    Tensor bhh = testutil::random_tensor({3 * hidden}, 50, 0.3);

    Tensor h = gru_cell_step(x, h_prev, wih, bih, whh, bhh);

    // Direct gate equations with std:: math as the independent route.
    for (int i = 0; i < batch; ++i) {
        for (int u = 0; u < hidden; ++u) {
            auto gate = [&](int col) {
                double gi = bih[col];
                for (int t = 0; t < in_dim; ++t) gi += x.at(i, t) * wih.at(t, col);
                double gh = bhh[col];
                for (int t = 0; t < hidden; ++t) gh += h_prev.at(i, t) * whh.at(t, col);
                return std::make_pair(gi, gh);
            };
            auto [gi_r, gh_r] = gate(u);
            auto [gi_z, gh_z] = gate(hidden + u);
            auto [gi_n, gh_n] = gate(2 * hidden + u);
            const double r = 1.0 / (1.0 + std::exp(-(gi_r + gh_r)));
            const double z = 1.0 / (1.0 + std::exp(-(gi_z + gh_z)));
            const double n = std::tanh(gi_n + r * gh_n);
            const double expect = (1.0 - z) * n + z * h_prev.at(i, u);
            CHECK(std::abs(h.at(i, u) - expect) < 1e-10);
        }
    }
}

TEST_CASE("fast math matches the standard library") {
    double worst_exp = 0.0, worst_tanh = 0.0, worst_sig = 0.0;
    Rng rng(51);
    for (int i = 0; i < 20000; ++i) {
        const double x = rng.uniform(-30.0, 30.0);
        worst_exp = std::max(worst_exp, std::abs(fast_exp(x) - std::exp(x)) /
                                            std::max(std::exp(x), 1e-300));
        worst_tanh = std::max(worst_tanh, std::abs(fast_tanh(x) - std::tanh(x)));
        worst_sig = std::max(worst_sig, std::abs(fast_sigmoid(x) - 1.0 / (1.0 + std::exp(-x))));
    }
    CHECK(worst_exp < 1e-13);
    CHECK(worst_tanh < 1e-13);
    CHECK(worst_sig < 1e-13);

    // Batched variants agree with the scalar ones.
    Tensor xs = testutil::random_tensor({1000}, 52, 4.0);
    Tensor out({1000});
    vtanh(xs.data(), out.data(), 1000);
    for (int i = 0; i < 1000; ++i) CHECK(std::abs(out[i] - std::tanh(xs[i])) < 1e-13);
    vsigmoid(xs.data(), out.data(), 1000);
    for (int i = 0; i < 1000; ++i) {
        CHECK(std::abs(out[i] - 1.0 / (1.0 + std::exp(-xs[i]))) < 1e-13);
    }
}

TEST_SUITE_END();

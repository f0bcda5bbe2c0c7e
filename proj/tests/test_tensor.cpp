// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/tensor.hpp"
#include "test_helpers.hpp"

using namespace cmdskel;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and zero") {
    Tensor a = testutil::random_tensor({5, 5}, 11);
    Tensor eye({5, 5});
    for (int i = 0; i < 5; ++i) eye.at(i, i) = 1.0;
    Tensor ai = matmul_val(a, eye);
    CHECK(testutil::max_abs_diff(a, ai) == 0.0);

    Tensor zero({5, 3});
    Tensor az = matmul_val(a, zero);
    for (int64_t i = 0; i < az.size(); ++i) CHECK(az[i] == 0.0);
}

TEST_CASE("matmul equals the naive triple loop") {
    Tensor a = testutil::random_tensor({5, 4}, 21);
    Tensor b = testutil::random_tensor({4, 3}, 22);
    Tensor c = matmul_val(a, b);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int t = 0; t < 4; ++t) s += a.at(i, t) * b.at(t, j);
            CHECK(std::abs(c.at(i, j) - s) < 1e-12);
        }
    }
}

TEST_CASE("matmul shape mismatch reports both shapes") {
    Tensor a({2, 3}), b({4, 2});
    CHECK_THROWS_WITH_AS(matmul_val(a, b), doctest::Contains("(2x3)"), ShapeError);
    CHECK_THROWS_WITH_AS(matmul_val(a, b), doctest::Contains("(4x2)"), ShapeError);
}

TEST_CASE("matmul kernels agree with the naive loop on odd sizes") {
    // Exercises the blocked kernel's row/column tails.
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 7, 5}, {17, 13, 23}, {33, 9, 40}, {64, 150, 192}}) {
        Tensor a = testutil::random_tensor({m, k}, 100 + m);
        Tensor b = testutil::random_tensor({k, n}, 200 + n);
        Tensor c = matmul_val(a, b);
        double worst = 0.0;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
                worst = std::max(worst, std::abs(c.at(i, j) - s));
            }
        }
        CHECK(worst < 1e-10);
    }
}

TEST_CASE("matmul_nt and matmul_tn match explicit transposition") {
    Tensor a = testutil::random_tensor({6, 9}, 31);
    Tensor b = testutil::random_tensor({7, 9}, 32);
    Tensor nt = matmul_nt_val(a, b);  // a * b^T
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 7; ++j) {
            double s = 0.0;
            for (int t = 0; t < 9; ++t) s += a.at(i, t) * b.at(j, t);
            CHECK(std::abs(nt.at(i, j) - s) < 1e-12);
        }
    }
    Tensor c = testutil::random_tensor({9, 6}, 33);
    Tensor d = testutil::random_tensor({9, 7}, 34);
    Tensor tn = matmul_tn_val(c, d);  // c^T * d
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 7; ++j) {
            double s = 0.0;
            for (int t = 0; t < 9; ++t) s += c.at(t, i) * d.at(t, j);
            CHECK(std::abs(tn.at(i, j) - s) < 1e-12);
        }
    }
}

TEST_CASE("gemm bias fusion matches separate bias add") {
    const int m = 19, k = 11, n = 17;
    Tensor a = testutil::random_tensor({m, k}, 41);
    Tensor b = testutil::random_tensor({k, n}, 42);
    Tensor bias = testutil::random_tensor({n}, 43);
    Tensor fused({m, n});
    gemm_nn_bias(a.data(), b.data(), bias.data(), fused.data(), m, k, n);
    Tensor plain = matmul_val(a, b);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            CHECK(std::abs(fused.at(i, j) - (plain.at(i, j) + bias[j])) < 1e-12);
        }
    }
}

TEST_CASE("softmax basics") {
    SUBCASE("equal logits give the uniform distribution") {
        for (double tau : {1.0, 0.05, 3.0}) {
            Tensor logits({8}, 0.73);
            Tensor p = softmax(constant(logits), tau).value();
            for (int i = 0; i < 8; ++i) CHECK(p[i] == doctest::Approx(1.0 / 8).epsilon(1e-12));
        }
    }
    SUBCASE("[ln 2, 0] at tau 1 gives [2/3, 1/3]") {
        Tensor logits({2});
        logits[0] = std::log(2.0);
        Tensor p = softmax(constant(logits), 1.0).value();
        CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("random logits at tau 0.05 match the direct formula") {
        Tensor logits = testutil::random_tensor({16}, 51);
        Tensor p = softmax(constant(logits), 0.05).value();
        double sum = 0.0;
        for (int i = 0; i < 16; ++i) sum += p[i];
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        // Direct formula in long double as the independent route.
        long double mx = logits[0];
        for (int i = 1; i < 16; ++i) mx = std::max<long double>(mx, logits[i]);
        long double denom = 0.0;
        for (int i = 0; i < 16; ++i) denom += expl((static_cast<long double>(logits[i]) - mx) / 0.05L);
        for (int i = 0; i < 16; ++i) {
            const long double expect =
                expl((static_cast<long double>(logits[i]) - mx) / 0.05L) / denom;
            CHECK(std::abs(p[i] - static_cast<double>(expect)) < 1e-12);
        }
    }
    SUBCASE("rejects bad inputs") {
        Tensor logits({4}, 1.0);
        CHECK_THROWS_AS(softmax(constant(logits), 0.0), ValueError);
        CHECK_THROWS_AS(softmax(constant(logits), -1.0), ValueError);
        Tensor inf({2});
        inf[0] = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(softmax(constant(inf), 1.0), ValueError);
    }
    SUBCASE("outputs are strictly positive and sum to one on random draws") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor logits = testutil::random_tensor({32}, 600 + trial, 5.0);
            Tensor p = softmax(constant(logits), 0.05).value();
            double sum = 0.0;
            for (int i = 0; i < 32; ++i) {
                CHECK(p[i] > 0.0);
                sum += p[i];
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("kl_div") {
    SUBCASE("KL(p || p) = 0") {
        Tensor p = testutil::random_prob_vector(12, 61);
        CHECK(std::abs(kl_div(constant(p), constant(p)).value().item()) <= 1e-15);
    }
    SUBCASE("KL([1,0] || [1/2,1/2]) = ln 2") {
        Tensor p({2});
        p[0] = 1.0;
        Tensor q({2}, 0.5);
        CHECK(kl_div(constant(p), constant(q)).value().item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("matches the element-wise summation oracle") {
        Tensor p = testutil::random_prob_vector(16, 62);
        Tensor q = testutil::random_prob_vector(16, 63);
        double expect = 0.0;
        for (int i = 0; i < 16; ++i) expect += p[i] * std::log(p[i] / q[i]);
        CHECK(std::abs(kl_div(constant(p), constant(q)).value().item() - expect) < 1e-12);
    }
    SUBCASE("nonnegative, zero only at equality") {
        for (int trial = 0; trial < 30; ++trial) {
            Tensor p = testutil::random_prob_vector(8, 700 + trial);
            Tensor q = testutil::random_prob_vector(8, 800 + trial);
            const double v = kl_div(constant(p), constant(q)).value().item();
            CHECK(v >= -1e-12);
            if (testutil::max_abs_diff(p, q) > 1e-3) CHECK(v > 1e-9);
        }
    }
    SUBCASE("q = 0 where p > 0 is a numeric-domain error") {
        Tensor p({2});
        p[0] = 1.0;
        Tensor q({2});
        q[1] = 1.0;
        CHECK_THROWS_AS(kl_div(constant(p), constant(q)), NumericError);
    }
    SUBCASE("inputs must sum to one") {
        Tensor p({2}, 0.7);
        Tensor q({2}, 0.5);
        CHECK_THROWS_AS(kl_div(constant(p), constant(q)), ValueError);
    }
}

TEST_CASE("topk") {
    SUBCASE("K = N is a full descending sort") {
        Tensor v = testutil::random_tensor({9}, 71);
        auto [vals, idx] = topk(v, 9);
        for (int i = 1; i < 9; ++i) CHECK(vals[i] <= vals[i - 1]);
        std::vector<int32_t> sorted = idx;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < 9; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
    }
    SUBCASE("analytic example") {
        Tensor v({3});
        v[0] = 0.1;
        v[1] = 0.9;
        v[2] = 0.5;
        auto [vals, idx] = topk(v, 2);
        CHECK(vals[0] == 0.9);
        CHECK(vals[1] == 0.5);
        CHECK(idx[0] == 1);
        CHECK(idx[1] == 2);
    }
    SUBCASE("random N=1000, K=37 equals the sort-then-slice oracle") {
        Tensor v = testutil::random_tensor({1000}, 72);
        auto [vals, idx] = topk(v, 37);
        std::vector<int> order(1000);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
        for (int i = 0; i < 37; ++i) {
            CHECK(idx[static_cast<size_t>(i)] == order[static_cast<size_t>(i)]);
            CHECK(vals[i] == v[order[static_cast<size_t>(i)]]);
        }
    }
    SUBCASE("duplicates break ties toward the smaller index") {
        for (int trial = 0; trial < 25; ++trial) {
            Rng rng(900 + trial);
            const int n = 2 + static_cast<int>(rng.below(200));
            Tensor v({n});
            for (int i = 0; i < n; ++i) v[i] = std::floor(rng.uniform() * 5.0);
            const int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n)));
            auto [vals, idx] = topk(v, k);
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
            for (int i = 0; i < k; ++i) {
                CHECK(idx[static_cast<size_t>(i)] == order[static_cast<size_t>(i)]);
            }
        }
    }
    SUBCASE("K out of range is a parameter error") {
        Tensor v({4}, 1.0);
        CHECK_THROWS_AS(topk(v, 5), ValueError);
        CHECK_THROWS_AS(topk(v, 0), ValueError);
    }
}

TEST_CASE("l2_normalize") {
    SUBCASE("[3,4] -> [0.6,0.8]") {
        Tensor v({2});
        v[0] = 3.0;
        v[1] = 4.0;
        Tensor u = l2_normalize(constant(v)).value();
        CHECK(u[0] == doctest::Approx(0.6).epsilon(1e-12));
        CHECK(u[1] == doctest::Approx(0.8).epsilon(1e-12));
    }
    SUBCASE("unit vector maps to itself") {
        Tensor v({3});
        v[2] = 1.0;
        Tensor u = l2_normalize(constant(v)).value();
        CHECK(testutil::max_abs_diff(u, v) <= 1e-15);
    }
    SUBCASE("random vectors end up unit norm") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor v = testutil::random_tensor({10}, 1000 + trial, 3.0);
            Tensor u = l2_normalize(constant(v)).value();
            CHECK(std::abs(l2_norm(u) - 1.0) <= 1e-9);
        }
    }
    SUBCASE("degenerate input is rejected") {
        Tensor v({4});
        CHECK_THROWS_AS(l2_normalize(constant(v)), ValueError);
    }
}

TEST_SUITE_END();

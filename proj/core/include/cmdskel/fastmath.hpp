// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

namespace cmdskel {

// Branchless double-precision exp accurate to ~1 ulp over the clamped range.
// Rational approximation on the reduced argument (Cody-Waite split of ln 2),
// written so the compiler can vectorize loops that call it.
inline double fast_exp(double x) {
    constexpr double kLog2E = 1.4426950408889634073599;
    constexpr double kC1 = 6.93145751953125e-1;
    constexpr double kC2 = 1.42860682030941723212e-6;
    constexpr double kP0 = 1.26177193074810590878e-4;
    constexpr double kP1 = 3.02994407707441961300e-2;
    constexpr double kP2 = 9.99999999999999999910e-1;
    constexpr double kQ0 = 3.00198505138664455042e-6;
    constexpr double kQ1 = 2.52448340349684104192e-3;
    constexpr double kQ2 = 2.27265548208155028766e-1;
    constexpr double kQ3 = 2.00000000000000000005e0;

    x = x < -708.0 ? -708.0 : x;
    x = x > 708.0 ? 708.0 : x;

    double n = std::nearbyint(x * kLog2E);
    double r = x - n * kC1;
    r -= n * kC2;

    const double rr = r * r;
    const double p = r * (kP2 + rr * (kP1 + rr * kP0));
    const double q = kQ3 + rr * (kQ2 + rr * (kQ1 + rr * kQ0));
    double y = 1.0 + 2.0 * p / (q - p);

    // Scale by 2^n through direct exponent construction; n is in [-1022, 1023].
    const int64_t bits = (static_cast<int64_t>(n) + 1023) << 52;
    double two_n;
    std::memcpy(&two_n, &bits, sizeof(two_n));
    return y * two_n;
}

inline double fast_sigmoid(double x) { return 1.0 / (1.0 + fast_exp(-x)); }

inline double fast_tanh(double x) {
    const double e = fast_exp(-2.0 * x);
    return (1.0 - e) / (1.0 + e);
}

// Batched variants; SIMD where the target supports it, with identical
// arithmetic in the scalar fallback.
void vexp(const double* x, double* y, int n);
void vsigmoid(const double* x, double* y, int n);
void vtanh(const double* x, double* y, int n);

}  // namespace cmdskel

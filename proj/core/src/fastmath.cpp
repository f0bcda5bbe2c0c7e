// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/fastmath.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace cmdskel {

#if defined(__AVX512F__)

namespace {

inline __m512d exp512(__m512d x) {
    const __m512d kLog2E = _mm512_set1_pd(1.4426950408889634073599);
    const __m512d kC1 = _mm512_set1_pd(6.93145751953125e-1);
    const __m512d kC2 = _mm512_set1_pd(1.42860682030941723212e-6);
    const __m512d kP0 = _mm512_set1_pd(1.26177193074810590878e-4);
    const __m512d kP1 = _mm512_set1_pd(3.02994407707441961300e-2);
    const __m512d kP2 = _mm512_set1_pd(9.99999999999999999910e-1);
    const __m512d kQ0 = _mm512_set1_pd(3.00198505138664455042e-6);
    const __m512d kQ1 = _mm512_set1_pd(2.52448340349684104192e-3);
    const __m512d kQ2 = _mm512_set1_pd(2.27265548208155028766e-1);
    const __m512d kQ3 = _mm512_set1_pd(2.00000000000000000005e0);

    x = _mm512_max_pd(x, _mm512_set1_pd(-708.0));
    x = _mm512_min_pd(x, _mm512_set1_pd(708.0));

    const __m512d n = _mm512_roundscale_pd(_mm512_mul_pd(x, kLog2E),
                                           _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m512d r = _mm512_fnmadd_pd(n, kC1, x);
    r = _mm512_fnmadd_pd(n, kC2, r);

    const __m512d rr = _mm512_mul_pd(r, r);
    const __m512d p =
        _mm512_mul_pd(r, _mm512_fmadd_pd(rr, _mm512_fmadd_pd(rr, kP0, kP1), kP2));
    const __m512d q =
        _mm512_fmadd_pd(rr, _mm512_fmadd_pd(rr, _mm512_fmadd_pd(rr, kQ0, kQ1), kQ2), kQ3);
    const __m512d one = _mm512_set1_pd(1.0);
    const __m512d y = _mm512_fmadd_pd(_mm512_set1_pd(2.0),
                                      _mm512_div_pd(p, _mm512_sub_pd(q, p)), one);
    return _mm512_scalef_pd(y, n);
}

}  // namespace

void vexp(const double* x, double* y, int n) {
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm512_storeu_pd(y + i, exp512(_mm512_loadu_pd(x + i)));
    }
    if (i < n) {
        const __mmask8 m = static_cast<__mmask8>((1u << (n - i)) - 1u);
        _mm512_mask_storeu_pd(y + i, m, exp512(_mm512_maskz_loadu_pd(m, x + i)));
    }
}

void vsigmoid(const double* x, double* y, int n) {
    const __m512d one = _mm512_set1_pd(1.0);
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m512d e = exp512(_mm512_sub_pd(_mm512_setzero_pd(), _mm512_loadu_pd(x + i)));
        _mm512_storeu_pd(y + i, _mm512_div_pd(one, _mm512_add_pd(one, e)));
    }
    if (i < n) {
        const __mmask8 m = static_cast<__mmask8>((1u << (n - i)) - 1u);
        const __m512d e =
            exp512(_mm512_sub_pd(_mm512_setzero_pd(), _mm512_maskz_loadu_pd(m, x + i)));
        _mm512_mask_storeu_pd(y + i, m, _mm512_div_pd(one, _mm512_add_pd(one, e)));
    }
}

void vtanh(const double* x, double* y, int n) {
    const __m512d one = _mm512_set1_pd(1.0);
    const __m512d neg2 = _mm512_set1_pd(-2.0);
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m512d e = exp512(_mm512_mul_pd(neg2, _mm512_loadu_pd(x + i)));
        _mm512_storeu_pd(y + i, _mm512_div_pd(_mm512_sub_pd(one, e), _mm512_add_pd(one, e)));
    }
    if (i < n) {
        const __mmask8 m = static_cast<__mmask8>((1u << (n - i)) - 1u);
        const __m512d e = exp512(_mm512_mul_pd(neg2, _mm512_maskz_loadu_pd(m, x + i)));
        _mm512_mask_storeu_pd(y + i, m, _mm512_div_pd(_mm512_sub_pd(one, e), _mm512_add_pd(one, e)));
    }
}

#else

void vexp(const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] = fast_exp(x[i]);
}

void vsigmoid(const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] = fast_sigmoid(x[i]);
}

void vtanh(const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] = fast_tanh(x[i]);
}

#endif

}  // namespace cmdskel

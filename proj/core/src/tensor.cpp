// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif
#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cmdskel {

namespace {

#if defined(__GLIBC__)
// Training allocates and frees large tensor blocks every step. With the
// default thresholds glibc serves them via mmap/munmap, whose page faulting
// serializes concurrent workers. Keeping large blocks on the arena free
// lists removes that bottleneck; the process then holds its steady-state
// working set between steps.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

int64_t shape_product(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::atomic<int> g_threads{0};           // 0 = hardware concurrency
thread_local int t_threads = -1;         // -1 = inherit process-wide setting

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_product(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_product(shape_)), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_product(shape_) != static_cast<int64_t>(data_.size())) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

double Tensor::item() const {
    if (size() != 1) throw UsageError("item() requires a 1-element tensor, got " + shape_str(*this));
    return data_[0];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_product(shape) != size()) {
        throw ShapeError("cannot reshape " + shape_str(*this) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

void set_compute_threads(int n) { g_threads.store(n); }

namespace detail {
void set_compute_threads_local(int n) { t_threads = n; }
}  // namespace detail

int compute_threads() {
    if (t_threads > 0) return t_threads;
    const int g = g_threads.load();
    if (g > 0) return g;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

#if defined(__AVX512F__)

// 8x8 register-tiled micro-kernel: eight zmm accumulators, one B-row vector
// load plus eight broadcast-FMAs per k step. Column tails use masked
// loads/stores, row tails fall back to a single-row kernel.
void gemm_nn_range(const double* a, const double* b, double* c, int i0, int i1, int k, int n,
                   bool acc, const double* bias) {
    constexpr int kMr = 8;
    int i = i0;
    for (; i + kMr <= i1; i += kMr) {
        const double* arow[kMr];
        for (int r = 0; r < kMr; ++r) arow[r] = a + static_cast<size_t>(i + r) * k;
        int j = 0;
        for (; j + 8 <= n; j += 8) {
            const __m512d init = bias ? _mm512_loadu_pd(bias + j) : _mm512_setzero_pd();
            __m512d accv[kMr];
            for (int r = 0; r < kMr; ++r) accv[r] = init;
            const double* bp = b + j;
            for (int t = 0; t < k; ++t) {
                const __m512d bv = _mm512_loadu_pd(bp + static_cast<size_t>(t) * n);
                for (int r = 0; r < kMr; ++r) {
                    accv[r] = _mm512_fmadd_pd(_mm512_set1_pd(arow[r][t]), bv, accv[r]);
                }
            }
            for (int r = 0; r < kMr; ++r) {
                double* dst = c + static_cast<size_t>(i + r) * n + j;
                if (acc) accv[r] = _mm512_add_pd(accv[r], _mm512_loadu_pd(dst));
                _mm512_storeu_pd(dst, accv[r]);
            }
        }
        if (j < n) {
            const __mmask8 tail = static_cast<__mmask8>((1u << (n - j)) - 1u);
            const __m512d init = bias ? _mm512_maskz_loadu_pd(tail, bias + j) : _mm512_setzero_pd();
            __m512d accv[kMr];
            for (int r = 0; r < kMr; ++r) accv[r] = init;
            const double* bp = b + j;
            for (int t = 0; t < k; ++t) {
                const __m512d bv = _mm512_maskz_loadu_pd(tail, bp + static_cast<size_t>(t) * n);
                for (int r = 0; r < kMr; ++r) {
                    accv[r] = _mm512_fmadd_pd(_mm512_set1_pd(arow[r][t]), bv, accv[r]);
                }
            }
            for (int r = 0; r < kMr; ++r) {
                double* dst = c + static_cast<size_t>(i + r) * n + j;
                if (acc) accv[r] = _mm512_add_pd(accv[r], _mm512_maskz_loadu_pd(tail, dst));
                _mm512_mask_storeu_pd(dst, tail, accv[r]);
            }
        }
    }
    for (; i < i1; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        int j = 0;
        for (; j + 8 <= n; j += 8) {
            __m512d accv = bias ? _mm512_loadu_pd(bias + j) : _mm512_setzero_pd();
            const double* bp = b + j;
            for (int t = 0; t < k; ++t) {
                accv = _mm512_fmadd_pd(_mm512_set1_pd(ar[t]),
                                       _mm512_loadu_pd(bp + static_cast<size_t>(t) * n), accv);
            }
            double* dst = c + static_cast<size_t>(i) * n + j;
            if (acc) accv = _mm512_add_pd(accv, _mm512_loadu_pd(dst));
            _mm512_storeu_pd(dst, accv);
        }
        if (j < n) {
            const __mmask8 tail = static_cast<__mmask8>((1u << (n - j)) - 1u);
            __m512d accv = bias ? _mm512_maskz_loadu_pd(tail, bias + j) : _mm512_setzero_pd();
            const double* bp = b + j;
            for (int t = 0; t < k; ++t) {
                accv = _mm512_fmadd_pd(_mm512_set1_pd(ar[t]),
                                       _mm512_maskz_loadu_pd(tail, bp + static_cast<size_t>(t) * n),
                                       accv);
            }
            double* dst = c + static_cast<size_t>(i) * n + j;
            if (acc) accv = _mm512_add_pd(accv, _mm512_maskz_loadu_pd(tail, dst));
            _mm512_mask_storeu_pd(dst, tail, accv);
        }
    }
}

#else  // portable fallback

inline void kernel_4x8(const double* __restrict a0, const double* __restrict a1,
                       const double* __restrict a2, const double* __restrict a3,
                       const double* __restrict b, int k, int ldb, double* __restrict out,
                       int ldc, bool acc) {
    double c[4][8] = {};
    for (int t = 0; t < k; ++t) {
        const double* __restrict brow = b + static_cast<size_t>(t) * ldb;
        const double av0 = a0[t], av1 = a1[t], av2 = a2[t], av3 = a3[t];
        for (int q = 0; q < 8; ++q) {
            const double bq = brow[q];
            c[0][q] += av0 * bq;
            c[1][q] += av1 * bq;
            c[2][q] += av2 * bq;
            c[3][q] += av3 * bq;
        }
    }
    for (int r = 0; r < 4; ++r) {
        double* dst = out + static_cast<size_t>(r) * ldc;
        if (acc) {
            for (int q = 0; q < 8; ++q) dst[q] += c[r][q];
        } else {
            for (int q = 0; q < 8; ++q) dst[q] = c[r][q];
        }
    }
}

void gemm_nn_range(const double* a, const double* b, double* c, int i0, int i1, int k, int n,
                   bool acc, const double* bias) {
    int i = i0;
    for (; i + 4 <= i1; i += 4) {
        const double* a0 = a + static_cast<size_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        int j = 0;
        for (; j + 8 <= n; j += 8) {
            kernel_4x8(a0, a1, a2, a3, b + j, k, n, c + static_cast<size_t>(i) * n + j, n, acc);
        }
        for (; j < n; ++j) {
            for (int r = 0; r < 4; ++r) {
                const double* ar = a + static_cast<size_t>(i + r) * k;
                double s = 0.0;
                for (int t = 0; t < k; ++t) s += ar[t] * b[static_cast<size_t>(t) * n + j];
                double* dst = c + static_cast<size_t>(i + r) * n + j;
                *dst = acc ? *dst + s : s;
            }
        }
        if (bias) {
            for (int r = 0; r < 4; ++r) {
                double* dst = c + static_cast<size_t>(i + r) * n;
                for (int jj = 0; jj < n; ++jj) dst[jj] += bias[jj];
            }
        }
    }
    for (; i < i1; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += ar[t] * b[static_cast<size_t>(t) * n + j];
            double* dst = c + static_cast<size_t>(i) * n + j;
            *dst = acc ? *dst + s : s;
            if (bias) *dst += bias[j];
        }
    }
}

#endif  // __AVX512F__

// Blocked out-of-place transpose into thread-local scratch.
const double* transposed(const double* src, int rows, int cols, std::vector<double>& scratch) {
    scratch.resize(static_cast<size_t>(rows) * cols);
    constexpr int kBlk = 32;
    for (int i0 = 0; i0 < rows; i0 += kBlk) {
        const int i1 = std::min(rows, i0 + kBlk);
        for (int j0 = 0; j0 < cols; j0 += kBlk) {
            const int j1 = std::min(cols, j0 + kBlk);
            for (int i = i0; i < i1; ++i) {
                for (int j = j0; j < j1; ++j) {
                    scratch[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
                }
            }
        }
    }
    return scratch.data();
}

thread_local std::vector<double> tl_scratch_a;
thread_local std::vector<double> tl_scratch_b;

}  // namespace

namespace {
void gemm_nn_dispatch(const double* a, const double* b, double* c, int m, int k, int n, bool acc,
                      const double* bias) {
    const int nt = compute_threads();
    const int64_t work = static_cast<int64_t>(m) * k * n;
#ifdef _OPENMP
    if (nt > 1 && work >= (1 << 20)) {
        // Static row partition: every C element is written by exactly one
        // thread, so results do not depend on the thread count.
        const int rows_per = (m + nt - 1) / nt;
#pragma omp parallel for schedule(static, 1) num_threads(nt)
        for (int blk = 0; blk < nt; ++blk) {
            const int i0 = blk * rows_per;
            const int i1 = std::min(m, i0 + rows_per);
            if (i0 < i1) gemm_nn_range(a, b, c, i0, i1, k, n, acc, bias);
        }
        return;
    }
#endif
    (void)nt;
    (void)work;
    gemm_nn_range(a, b, c, 0, m, k, n, acc, bias);
}
}  // namespace

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    gemm_nn_dispatch(a, b, c, m, k, n, acc, nullptr);
}

void gemm_nn_bias(const double* a, const double* b, const double* bias, double* c, int m, int k,
                  int n) {
    gemm_nn_dispatch(a, b, c, m, k, n, false, bias);
}

namespace {

void gemm_nn_bias_f32out_range(const double* a, const double* b, const double* bias, float* c,
                               int i0, int i1, int k, int n) {
#if defined(__AVX512F__) && defined(__AVX512VL__)
    constexpr int kMr = 8;
    int i = i0;
    for (; i + kMr <= i1; i += kMr) {
        const double* arow[kMr];
        for (int r = 0; r < kMr; ++r) arow[r] = a + static_cast<size_t>(i + r) * k;
        int j = 0;
        for (; j + 8 <= n; j += 8) {
            const __m512d init = bias ? _mm512_loadu_pd(bias + j) : _mm512_setzero_pd();
            __m512d accv[kMr];
            for (int r = 0; r < kMr; ++r) accv[r] = init;
            const double* bp = b + j;
            for (int t = 0; t < k; ++t) {
                const __m512d bv = _mm512_loadu_pd(bp + static_cast<size_t>(t) * n);
                for (int r = 0; r < kMr; ++r) {
                    accv[r] = _mm512_fmadd_pd(_mm512_set1_pd(arow[r][t]), bv, accv[r]);
                }
            }
            for (int r = 0; r < kMr; ++r) {
                _mm256_storeu_ps(c + static_cast<size_t>(i + r) * n + j, _mm512_cvtpd_ps(accv[r]));
            }
        }
        for (; j < n; ++j) {
            for (int r = 0; r < kMr; ++r) {
                double s = bias ? bias[j] : 0.0;
                for (int t = 0; t < k; ++t) s += arow[r][t] * b[static_cast<size_t>(t) * n + j];
                c[static_cast<size_t>(i + r) * n + j] = static_cast<float>(s);
            }
        }
    }
    for (; i < i1; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            double s = bias ? bias[j] : 0.0;
            for (int t = 0; t < k; ++t) s += ar[t] * b[static_cast<size_t>(t) * n + j];
            c[static_cast<size_t>(i) * n + j] = static_cast<float>(s);
        }
    }
#else
    for (int i = i0; i < i1; ++i) {
        const double* ar = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            double s = bias ? bias[j] : 0.0;
            for (int t = 0; t < k; ++t) s += ar[t] * b[static_cast<size_t>(t) * n + j];
            c[static_cast<size_t>(i) * n + j] = static_cast<float>(s);
        }
    }
#endif
}

}  // namespace

void gemm_nn_bias_f32out(const double* a, const double* b, const double* bias, float* c, int m,
                         int k, int n) {
    const int nt = compute_threads();
    const int64_t work = static_cast<int64_t>(m) * k * n;
#ifdef _OPENMP
    if (nt > 1 && work >= (1 << 20)) {
        const int rows_per = (m + nt - 1) / nt;
#pragma omp parallel for schedule(static, 1) num_threads(nt)
        for (int blk = 0; blk < nt; ++blk) {
            const int i0 = blk * rows_per;
            const int i1 = std::min(m, i0 + rows_per);
            if (i0 < i1) gemm_nn_bias_f32out_range(a, b, bias, c, i0, i1, k, n);
        }
        return;
    }
#endif
    (void)nt;
    (void)work;
    gemm_nn_bias_f32out_range(a, b, bias, c, 0, m, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    const double* bt = transposed(b, n, k, tl_scratch_b);  // (n x k) -> (k x n)
    gemm_nn(a, bt, c, m, k, n, acc);
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    const double* at = transposed(a, k, m, tl_scratch_a);  // (k x m) -> (m x k)
    gemm_nn(at, b, c, m, k, n, acc);
}

namespace {
void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(t));
}
}  // namespace

Tensor matmul_val(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) + " vs " + shape_str(b));
    }
    Tensor c({a.rows(), b.cols()});
    gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), false);
    return c;
}

Tensor matmul_nt_val(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a) + " vs " + shape_str(b));
    }
    Tensor c({a.rows(), b.rows()});
    gemm_nt(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.rows(), false);
    return c;
}

Tensor matmul_tn_val(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: inner dimensions disagree, " + shape_str(a) + " vs " + shape_str(b));
    }
    Tensor c({a.cols(), b.cols()});
    gemm_tn(a.data(), b.data(), c.data(), a.cols(), a.rows(), b.cols(), false);
    return c;
}

void axpy(Tensor& y, double alpha, const Tensor& x) {
    check_same_shape(y, x, "axpy");
    double* yd = y.data();
    const double* xd = x.data();
    const int64_t n = y.size();
    for (int64_t i = 0; i < n; ++i) yd[i] += alpha * xd[i];
}

void scale_inplace(Tensor& t, double alpha) {
    double* d = t.data();
    const int64_t n = t.size();
    for (int64_t i = 0; i < n; ++i) d[i] *= alpha;
}

Tensor colsum(const Tensor& a) {
    require_matrix(a, "colsum");
    Tensor out({a.cols()});
    for (int i = 0; i < a.rows(); ++i) {
        const double* row = a.data() + static_cast<size_t>(i) * a.cols();
        for (int j = 0; j < a.cols(); ++j) out[j] += row[j];
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

bool all_finite(const Tensor& a) {
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(a[i])) return false;
    }
    return true;
}

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmdskel/error.hpp"

namespace cmdskel {

// Dense row-major tensor of doubles. Values are plain data; gradient tracking
// lives in the tape (see autodiff.hpp).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, double fill);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(double v) { return Tensor({1}, v); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    // 2-D convenience.
    int rows() const { return shape_.at(0); }
    int cols() const { return shape_.at(1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int i, int j) { return data_[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return data_[static_cast<size_t>(i) * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double item() const;  // value of a 1-element tensor

    Tensor reshaped(std::vector<int> shape) const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::string shape_str(const std::vector<int>& shape);
inline std::string shape_str(const Tensor& t) { return shape_str(t.shape()); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Thread budget for the matrix kernels. Partitioning is static, so results
// are bit-identical for any thread count.
void set_compute_threads(int n);
int compute_threads();

namespace detail {
// Per-thread override; the trainer pins worker threads to a budget of 1 while
// it parallelizes across modalities.
void set_compute_threads_local(int n);
}  // namespace detail

// C = A * B (and friends). All matrices row-major; `acc` adds into C instead
// of overwriting. The _nt variant takes B transposed (B is n x k), the _tn
// variant takes A transposed (A is k x m).
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);

// C = A * B + row-broadcast bias, fused into the kernel epilogue.
void gemm_nn_bias(const double* a, const double* b, const double* bias, double* c, int m, int k,
                  int n);

// As above with the result rounded to single precision on store. Used by the
// optional reduced-precision training storage mode.
void gemm_nn_bias_f32out(const double* a, const double* b, const double* bias, float* c, int m,
                         int k, int n);

Tensor matmul_val(const Tensor& a, const Tensor& b);
Tensor matmul_nt_val(const Tensor& a, const Tensor& b);
Tensor matmul_tn_val(const Tensor& a, const Tensor& b);

// y += alpha * x
void axpy(Tensor& y, double alpha, const Tensor& x);
void scale_inplace(Tensor& t, double alpha);
Tensor colsum(const Tensor& a);                       // (m x n) -> (n)
double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace cmdskel

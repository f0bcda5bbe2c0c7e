// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "cmdskel/fastmath.hpp"

namespace cmdskel {

namespace {

// Access to an op input from a backprop closure: either a tape node id or a
// held constant.
struct Src {
    int id = -1;
    std::shared_ptr<const Tensor> held;

    const Tensor& get(const Tape& tp) const { return id >= 0 ? tp.value(id) : *held; }
    bool recorded() const { return id >= 0; }
};

Src src_of(const Var& v) {
    Src s;
    if (v.recorded()) {
        s.id = v.id();
    } else {
        s.held = v.holder();
    }
    return s;
}

Tape* result_tape(std::initializer_list<const Var*> vars) {
    Tape* t = nullptr;
    for (const Var* v : vars) {
        if (!v->defined()) throw UsageError("operation on an empty Var");
        if (v->recorded()) {
            if (t && t != v->tape()) throw UsageError("operands recorded on different tapes");
            t = v->tape();
        }
    }
    return t;
}

void accum(Tape& tp, const Src& s, const Tensor& g) {
    if (!s.recorded()) return;
    axpy(tp.grad_buffer(s.id), 1.0, g);
}

}  // namespace

const Tensor& Var::value() const {
    if (tape_) return tape_->value(id_);
    if (const_) return *const_;
    throw UsageError("reading an empty Var");
}

Var constant(Tensor t) {
    Var v;
    v.const_ = std::make_shared<const Tensor>(std::move(t));
    return v;
}

Var constant(std::shared_ptr<const Tensor> t) {
    Var v;
    v.const_ = std::move(t);
    return v;
}

Var Tape::leaf(Tensor value) {
    Var v;
    v.tape_ = this;
    v.id_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr});
    return v;
}

Var Tape::make(Tensor value, std::function<void(Tape&, Node&)> backprop) {
    Var v;
    v.tape_ = this;
    v.id_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(value), Tensor(), false, std::move(backprop)});
    return v;
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

Tensor& Tape::grad_buffer(int id, bool* fresh) {
    Node& n = nodes_[static_cast<size_t>(id)];
    *fresh = !n.has_grad;
    if (!n.has_grad) {
        // Value-initialization is skipped; the caller overwrites every entry.
        Tensor t;
        t = Tensor(n.value.shape());
        n.grad = std::move(t);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(const Var& loss) {
    if (loss.value().size() != 1) {
        throw UsageError("backward requires a scalar loss, got " + shape_str(loss.value()));
    }
    if (!loss.recorded()) return;  // constant loss: every gradient stays zero
    if (loss.tape() != this) throw UsageError("loss belongs to a different tape");
    grad_buffer(loss.id())[0] += 1.0;
    for (int i = loss.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.has_grad && n.backprop) n.backprop(*this, n);
    }
}

Tensor Tape::grad(const Var& v) const {
    if (!v.recorded() || v.tape() != this) throw UsageError("grad() of a var not recorded on this tape");
    const Node& n = nodes_[static_cast<size_t>(v.id())];
    return n.has_grad ? n.grad : Tensor(n.value.shape());
}

// ---- elementwise and linear ops --------------------------------------------

Var matmul(const Var& a, const Var& b) {
    Tensor c = matmul_val(a.value(), b.value());
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb](Tape& tp, Tape::Node& n) {
        const Tensor& A = sa.get(tp);
        const Tensor& B = sb.get(tp);
        const int m = A.rows(), k = A.cols(), nn = B.cols();
        if (sa.recorded()) {
            gemm_nt(n.grad.data(), B.data(), tp.grad_buffer(sa.id).data(), m, nn, k, true);
        }
        if (sb.recorded()) {
            gemm_tn(A.data(), n.grad.data(), tp.grad_buffer(sb.id).data(), k, m, nn, true);
        }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    Tensor c = matmul_nt_val(a.value(), b.value());
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb](Tape& tp, Tape::Node& n) {
        const Tensor& A = sa.get(tp);
        const Tensor& B = sb.get(tp);
        const int m = A.rows(), k = A.cols(), nn = B.rows();
        if (sa.recorded()) {
            gemm_nn(n.grad.data(), B.data(), tp.grad_buffer(sa.id).data(), m, nn, k, true);
        }
        if (sb.recorded()) {
            gemm_tn(n.grad.data(), A.data(), tp.grad_buffer(sb.id).data(), nn, m, k, true);
        }
    });
}

Var add(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_same_shape(A, B, "add");
    Tensor c(A.shape());
    for (int64_t i = 0; i < c.size(); ++i) c[i] = A[i] + B[i];
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb](Tape& tp, Tape::Node& n) {
        accum(tp, sa, n.grad);
        accum(tp, sb, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_same_shape(A, B, "sub");
    Tensor c(A.shape());
    for (int64_t i = 0; i < c.size(); ++i) c[i] = A[i] - B[i];
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb](Tape& tp, Tape::Node& n) {
        accum(tp, sa, n.grad);
        if (sb.recorded()) axpy(tp.grad_buffer(sb.id), -1.0, n.grad);
    });
}

Var hadamard(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_same_shape(A, B, "hadamard");
    Tensor c(A.shape());
    for (int64_t i = 0; i < c.size(); ++i) c[i] = A[i] * B[i];
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb](Tape& tp, Tape::Node& n) {
        const Tensor& A = sa.get(tp);
        const Tensor& B = sb.get(tp);
        if (sa.recorded()) {
            Tensor& ga = tp.grad_buffer(sa.id);
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * B[i];
        }
        if (sb.recorded()) {
            Tensor& gb = tp.grad_buffer(sb.id);
            for (int64_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * A[i];
        }
    });
}

Var scale(const Var& a, double s) {
    const Tensor& A = a.value();
    Tensor c(A.shape());
    for (int64_t i = 0; i < c.size(); ++i) c[i] = s * A[i];
    if (!a.recorded()) return constant(std::move(c));
    Src sa = src_of(a);
    return a.tape()->make(std::move(c), [sa, s](Tape& tp, Tape::Node& n) {
        if (sa.recorded()) axpy(tp.grad_buffer(sa.id), s, n.grad);
    });
}

Var add_rowvec(const Var& a, const Var& v) {
    const Tensor& A = a.value();
    const Tensor& V = v.value();
    if (A.rank() != 2 || V.rank() != 1 || A.cols() != V.dim(0)) {
        throw ShapeError("add_rowvec: " + shape_str(A) + " vs " + shape_str(V));
    }
    Tensor c(A.shape());
    for (int i = 0; i < A.rows(); ++i) {
        for (int j = 0; j < A.cols(); ++j) c.at(i, j) = A.at(i, j) + V[j];
    }
    Tape* t = result_tape({&a, &v});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sv = src_of(v);
    return t->make(std::move(c), [sa, sv](Tape& tp, Tape::Node& n) {
        accum(tp, sa, n.grad);
        if (sv.recorded()) axpy(tp.grad_buffer(sv.id), 1.0, colsum(n.grad));
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.rows() != B.rows()) {
        throw ShapeError("concat_cols: " + shape_str(A) + " vs " + shape_str(B));
    }
    const int m = A.rows(), p = A.cols(), q = B.cols();
    Tensor c({m, p + q});
    for (int i = 0; i < m; ++i) {
        std::copy_n(A.data() + static_cast<size_t>(i) * p, p, c.data() + static_cast<size_t>(i) * (p + q));
        std::copy_n(B.data() + static_cast<size_t>(i) * q, q,
                    c.data() + static_cast<size_t>(i) * (p + q) + p);
    }
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(c));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(c), [sa, sb, p, q](Tape& tp, Tape::Node& n) {
        const int m = n.value.rows();
        if (sa.recorded()) {
            Tensor& ga = tp.grad_buffer(sa.id);
            for (int i = 0; i < m; ++i) {
                const double* g = n.grad.data() + static_cast<size_t>(i) * (p + q);
                double* dst = ga.data() + static_cast<size_t>(i) * p;
                for (int j = 0; j < p; ++j) dst[j] += g[j];
            }
        }
        if (sb.recorded()) {
            Tensor& gb = tp.grad_buffer(sb.id);
            for (int i = 0; i < m; ++i) {
                const double* g = n.grad.data() + static_cast<size_t>(i) * (p + q) + p;
                double* dst = gb.data() + static_cast<size_t>(i) * q;
                for (int j = 0; j < q; ++j) dst[j] += g[j];
            }
        }
    });
}

Var slice_cols(const Var& a, int j0, int j1) {
    const Tensor& A = a.value();
    if (A.rank() != 2 || j0 < 0 || j1 > A.cols() || j0 >= j1) {
        throw ShapeError("slice_cols: invalid range [" + std::to_string(j0) + ", " + std::to_string(j1) +
                         ") for " + shape_str(A));
    }
    const int m = A.rows(), w = j1 - j0;
    Tensor c({m, w});
    for (int i = 0; i < m; ++i) {
        std::copy_n(A.data() + static_cast<size_t>(i) * A.cols() + j0, w,
                    c.data() + static_cast<size_t>(i) * w);
    }
    if (!a.recorded()) return constant(std::move(c));
    Src sa = src_of(a);
    const int cols = A.cols();
    return a.tape()->make(std::move(c), [sa, j0, w, cols](Tape& tp, Tape::Node& n) {
        if (!sa.recorded()) return;
        Tensor& ga = tp.grad_buffer(sa.id);
        for (int i = 0; i < n.value.rows(); ++i) {
            const double* g = n.grad.data() + static_cast<size_t>(i) * w;
            double* dst = ga.data() + static_cast<size_t>(i) * cols + j0;
            for (int j = 0; j < w; ++j) dst[j] += g[j];
        }
    });
}

Var square(const Var& a) { return hadamard(a, a); }

Var sum_all(const Var& a) {
    const Tensor& A = a.value();
    double s = 0.0;
    for (int64_t i = 0; i < A.size(); ++i) s += A[i];
    if (!a.recorded()) return constant(Tensor::scalar(s));
    Src sa = src_of(a);
    return a.tape()->make(Tensor::scalar(s), [sa](Tape& tp, Tape::Node& n) {
        Tensor& ga = tp.grad_buffer(sa.id);
        const double g = n.grad[0];
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

Var detach(const Var& a) { return constant(a.value()); }

Var reshaped(const Var& a, std::vector<int> shape) {
    Tensor c = a.value().reshaped(shape);
    if (!a.recorded()) return constant(std::move(c));
    Src sa = src_of(a);
    return a.tape()->make(std::move(c), [sa](Tape& tp, Tape::Node& n) {
        Tensor& ga = tp.grad_buffer(sa.id);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    });
}

// ---- normalization ----------------------------------------------------------

namespace {
constexpr double kNormEps = 1e-12;
}

Var l2_normalize_rows(const Var& x) {
    const Tensor& X = x.value();
    if (X.rank() != 2) throw ShapeError("l2_normalize_rows: expected a matrix, got " + shape_str(X));
    const int m = X.rows(), d = X.cols();
    Tensor y(X.shape());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += row[j] * row[j];
        const double nrm = std::sqrt(s);
        if (nrm <= kNormEps) {
            throw ValueError("l2_normalize: degenerate input, row " + std::to_string(i) + " has norm " +
                             std::to_string(nrm));
        }
        (*norms)[static_cast<size_t>(i)] = nrm;
        double* out = y.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) out[j] = row[j] / nrm;
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, norms, d](Tape& tp, Tape::Node& n) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < n.value.rows(); ++i) {
            const double* g = n.grad.data() + static_cast<size_t>(i) * d;
            const double* yv = n.value.data() + static_cast<size_t>(i) * d;
            double* dst = gx.data() + static_cast<size_t>(i) * d;
            double gy = 0.0;
            for (int j = 0; j < d; ++j) gy += g[j] * yv[j];
            const double inv = 1.0 / (*norms)[static_cast<size_t>(i)];
            for (int j = 0; j < d; ++j) dst[j] += (g[j] - yv[j] * gy) * inv;
        }
    });
}

Var l2_normalize(const Var& v) {
    const Tensor& V = v.value();
    if (V.rank() != 1) throw ShapeError("l2_normalize: expected a vector, got " + shape_str(V));
    Var mat = reshaped(v, {1, V.dim(0)});
    return reshaped(l2_normalize_rows(mat), {V.dim(0)});
}

// ---- softmax family ---------------------------------------------------------

namespace {

void check_temperature(double tau) {
    if (!(tau > 0.0)) throw ValueError("temperature must be > 0, got " + std::to_string(tau));
}

void check_finite_input(const Tensor& t, const char* what) {
    if (!all_finite(t)) throw ValueError(std::string(what) + ": non-finite input");
}

// Writes softmax of row/tau into out; returns nothing. Stabilized by max
// subtraction so tau as small as 0.05 cannot overflow.
void softmax_row(const double* row, int n, double tau, double* out) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        const double e = std::exp((row[j] - mx) / tau);
        out[j] = e;
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) out[j] *= inv;
}

}  // namespace

Var row_softmax(const Var& x, double tau) {
    check_temperature(tau);
    const Tensor& X = x.value();
    if (X.rank() != 2) throw ShapeError("row_softmax: expected a matrix, got " + shape_str(X));
    check_finite_input(X, "softmax");
    const int m = X.rows(), n = X.cols();
    Tensor y(X.shape());
    for (int i = 0; i < m; ++i) {
        softmax_row(X.data() + static_cast<size_t>(i) * n, n, tau, y.data() + static_cast<size_t>(i) * n);
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, tau, n](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < nd.value.rows(); ++i) {
            const double* p = nd.value.data() + static_cast<size_t>(i) * n;
            const double* g = nd.grad.data() + static_cast<size_t>(i) * n;
            double* dst = gx.data() + static_cast<size_t>(i) * n;
            double gp = 0.0;
            for (int j = 0; j < n; ++j) gp += g[j] * p[j];
            for (int j = 0; j < n; ++j) dst[j] += p[j] * (g[j] - gp) / tau;
        }
    });
}

Var softmax(const Var& logits, double tau) {
    const Tensor& L = logits.value();
    if (L.rank() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(L));
    Var mat = reshaped(logits, {1, L.dim(0)});
    return reshaped(row_softmax(mat, tau), {L.dim(0)});
}

Var row_log_softmax(const Var& x, double tau) {
    check_temperature(tau);
    const Tensor& X = x.value();
    if (X.rank() != 2) throw ShapeError("row_log_softmax: expected a matrix, got " + shape_str(X));
    check_finite_input(X, "log_softmax");
    const int m = X.rows(), n = X.cols();
    Tensor y(X.shape());
    auto probs = std::make_shared<Tensor>(X.shape());
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp((row[j] - mx) / tau);
        const double lse = std::log(sum);
        double* out = y.data() + static_cast<size_t>(i) * n;
        double* pr = probs->data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            out[j] = (row[j] - mx) / tau - lse;
            pr[j] = std::exp(out[j]);
        }
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, probs, tau, n](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < nd.value.rows(); ++i) {
            const double* p = probs->data() + static_cast<size_t>(i) * n;
            const double* g = nd.grad.data() + static_cast<size_t>(i) * n;
            double* dst = gx.data() + static_cast<size_t>(i) * n;
            double gs = 0.0;
            for (int j = 0; j < n; ++j) gs += g[j];
            for (int j = 0; j < n; ++j) dst[j] += (g[j] - p[j] * gs) / tau;
        }
    });
}

Var row_logsumexp(const Var& x) {
    const Tensor& X = x.value();
    if (X.rank() != 2) throw ShapeError("row_logsumexp: expected a matrix, got " + shape_str(X));
    const int m = X.rows(), n = X.cols();
    Tensor y({m});
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        y[i] = mx + std::log(sum);
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, n](Tape& tp, Tape::Node& nd) {
        const Tensor& X = sx.get(tp);
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < X.rows(); ++i) {
            const double* row = X.data() + static_cast<size_t>(i) * n;
            double* dst = gx.data() + static_cast<size_t>(i) * n;
            const double l = nd.value[i];
            const double g = nd.grad[i];
            for (int j = 0; j < n; ++j) dst[j] += g * std::exp(row[j] - l);
        }
    });
}

// ---- KL divergence ----------------------------------------------------------

Var kl_div(const Var& p, const Var& q) {
    const Tensor& P = p.value();
    const Tensor& Q = q.value();
    check_same_shape(P, Q, "kl_div");
    double sp = 0.0, sq = 0.0;
    for (int64_t i = 0; i < P.size(); ++i) {
        if (P[i] < 0.0 || Q[i] < 0.0) throw ValueError("kl_div: negative probability mass");
        sp += P[i];
        sq += Q[i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
        throw ValueError("kl_div: inputs must sum to 1 within 1e-6");
    }
    double v = 0.0;
    for (int64_t i = 0; i < P.size(); ++i) {
        if (P[i] > 0.0) {
            if (Q[i] <= 0.0) throw NumericError("kl_div: q is zero where p has mass");
            v += P[i] * std::log(P[i] / Q[i]);
        }
    }
    Tape* t = result_tape({&p, &q});
    if (!t) return constant(Tensor::scalar(v));
    Src sp_src = src_of(p), sq_src = src_of(q);
    return t->make(Tensor::scalar(v), [sp_src, sq_src](Tape& tp, Tape::Node& n) {
        const Tensor& P = sp_src.get(tp);
        const Tensor& Q = sq_src.get(tp);
        const double g = n.grad[0];
        if (sq_src.recorded()) {
            Tensor& gq = tp.grad_buffer(sq_src.id);
            for (int64_t i = 0; i < P.size(); ++i) {
                if (P[i] > 0.0) gq[i] += -g * P[i] / Q[i];
            }
        }
        if (sp_src.recorded()) {
            Tensor& gp = tp.grad_buffer(sp_src.id);
            for (int64_t i = 0; i < P.size(); ++i) {
                if (P[i] > 0.0) gp[i] += g * (std::log(P[i] / Q[i]) + 1.0);
            }
        }
    });
}

Var kl_batchmean(const Tensor& teacher_probs, const Var& student_logp) {
    const Tensor& Q = student_logp.value();
    check_same_shape(teacher_probs, Q, "kl_batchmean");
    if (Q.rank() != 2) throw ShapeError("kl_batchmean: expected matrices, got " + shape_str(Q));
    const int m = Q.rows();
    double v = 0.0;
    for (int64_t i = 0; i < Q.size(); ++i) {
        const double pi = teacher_probs[i];
        if (pi < 0.0) throw ValueError("kl_batchmean: negative teacher mass");
        if (pi > 0.0) v += pi * (std::log(pi) - Q[i]);
    }
    v /= m;
    if (!student_logp.recorded()) return constant(Tensor::scalar(v));
    Src sq = src_of(student_logp);
    auto teacher = std::make_shared<Tensor>(teacher_probs);
    return student_logp.tape()->make(Tensor::scalar(v), [sq, teacher, m](Tape& tp, Tape::Node& n) {
        Tensor& gq = tp.grad_buffer(sq.id);
        const double g = n.grad[0] / m;
        for (int64_t i = 0; i < gq.size(); ++i) gq[i] += -g * (*teacher)[i];
    });
}

// ---- gathers ----------------------------------------------------------------

Var rows_dot(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    check_same_shape(A, B, "rows_dot");
    if (A.rank() != 2) throw ShapeError("rows_dot: expected matrices, got " + shape_str(A));
    const int m = A.rows(), d = A.cols();
    Tensor y({m});
    for (int i = 0; i < m; ++i) {
        const double* ar = A.data() + static_cast<size_t>(i) * d;
        const double* br = B.data() + static_cast<size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += ar[j] * br[j];
        y[i] = s;
    }
    Tape* t = result_tape({&a, &b});
    if (!t) return constant(std::move(y));
    Src sa = src_of(a), sb = src_of(b);
    return t->make(std::move(y), [sa, sb, d](Tape& tp, Tape::Node& n) {
        const Tensor& A = sa.get(tp);
        const Tensor& B = sb.get(tp);
        for (int i = 0; i < A.rows(); ++i) {
            const double g = n.grad[i];
            if (sa.recorded()) {
                double* dst = tp.grad_buffer(sa.id).data() + static_cast<size_t>(i) * d;
                const double* br = B.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += g * br[j];
            }
            if (sb.recorded()) {
                double* dst = tp.grad_buffer(sb.id).data() + static_cast<size_t>(i) * d;
                const double* ar = A.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += g * ar[j];
            }
        }
    });
}

Var gather_cols(const Var& x, const IndexMatrix& idx) {
    const Tensor& X = x.value();
    if (X.rank() != 2 || X.rows() != idx.rows) {
        throw ShapeError("gather_cols: " + shape_str(X) + " vs index rows " + std::to_string(idx.rows));
    }
    const int n = X.cols();
    for (int32_t j : idx.idx) {
        if (j < 0 || j >= n) throw UsageError("gather_cols: index " + std::to_string(j) + " out of range");
    }
    Tensor y({idx.rows, idx.cols});
    for (int r = 0; r < idx.rows; ++r) {
        const double* row = X.data() + static_cast<size_t>(r) * n;
        double* out = y.data() + static_cast<size_t>(r) * idx.cols;
        for (int c = 0; c < idx.cols; ++c) out[c] = row[idx.at(r, c)];
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    auto held = std::make_shared<IndexMatrix>(idx);
    return x.tape()->make(std::move(y), [sx, held, n](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int r = 0; r < held->rows; ++r) {
            double* dst = gx.data() + static_cast<size_t>(r) * n;
            const double* g = nd.grad.data() + static_cast<size_t>(r) * held->cols;
            for (int c = 0; c < held->cols; ++c) dst[held->at(r, c)] += g[c];
        }
    });
}

Var select_cols(const Var& x, const std::vector<int32_t>& col_per_row) {
    const Tensor& X = x.value();
    if (X.rank() != 2 || X.rows() != static_cast<int>(col_per_row.size())) {
        throw ShapeError("select_cols: " + shape_str(X) + " vs " + std::to_string(col_per_row.size()) +
                         " indices");
    }
    IndexMatrix idx{X.rows(), 1, col_per_row};
    return reshaped(gather_cols(x, idx), {X.rows()});
}

// ---- temporal pooling --------------------------------------------------------

namespace {
int block_batch(const Tensor& x, int time_steps, const char* what) {
    if (x.rank() != 2 || time_steps < 1 || x.rows() % time_steps != 0) {
        throw ShapeError(std::string(what) + ": rows of " + shape_str(x) + " not divisible by T=" +
                         std::to_string(time_steps));
    }
    return x.rows() / time_steps;
}
}  // namespace

Var mean_time_blocks(const Var& x, int time_steps) {
    const Tensor& X = x.value();
    const int b = block_batch(X, time_steps, "mean_time_blocks");
    const int f = X.cols();
    Tensor y({b, f});
    for (int t = 0; t < time_steps; ++t) {
        for (int i = 0; i < b; ++i) {
            const double* row = X.data() + (static_cast<size_t>(t) * b + i) * f;
            double* out = y.data() + static_cast<size_t>(i) * f;
            for (int j = 0; j < f; ++j) out[j] += row[j];
        }
    }
    scale_inplace(y, 1.0 / time_steps);
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, time_steps, b, f](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        const double inv = 1.0 / time_steps;
        for (int t = 0; t < time_steps; ++t) {
            for (int i = 0; i < b; ++i) {
                double* dst = gx.data() + (static_cast<size_t>(t) * b + i) * f;
                const double* g = nd.grad.data() + static_cast<size_t>(i) * f;
                for (int j = 0; j < f; ++j) dst[j] += g[j] * inv;
            }
        }
    });
}

Var max_time_blocks(const Var& x, int time_steps) {
    const Tensor& X = x.value();
    const int b = block_batch(X, time_steps, "max_time_blocks");
    const int f = X.cols();
    Tensor y({b, f});
    auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(b) * f, 0);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < f; ++j) {
            double best = X.at(i, j);  // t = 0 block
            int32_t best_t = 0;
            for (int t = 1; t < time_steps; ++t) {
                const double v = X[(static_cast<size_t>(t) * b + i) * f + j];
                if (v > best) {
                    best = v;
                    best_t = t;
                }
            }
            y.at(i, j) = best;
            (*arg)[static_cast<size_t>(i) * f + j] = best_t;
        }
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, arg, b, f](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < b; ++i) {
            for (int j = 0; j < f; ++j) {
                const int32_t t = (*arg)[static_cast<size_t>(i) * f + j];
                gx[(static_cast<size_t>(t) * b + i) * f + j] += nd.grad.at(i, j);
            }
        }
    });
}

Var bigru_final_block(const Var& x, int time_steps) {
    const Tensor& X = x.value();
    const int b = block_batch(X, time_steps, "bigru_final_block");
    const int f = X.cols();
    if (f % 2 != 0) throw ShapeError("bigru_final_block: feature width must be even");
    const int h = f / 2;
    Tensor y({b, f});
    for (int i = 0; i < b; ++i) {
        const double* last = X.data() + (static_cast<size_t>(time_steps - 1) * b + i) * f;
        const double* first = X.data() + static_cast<size_t>(i) * f;
        double* out = y.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < h; ++j) out[j] = last[j];
        for (int j = h; j < f; ++j) out[j] = first[j];
    }
    if (!x.recorded()) return constant(std::move(y));
    Src sx = src_of(x);
    return x.tape()->make(std::move(y), [sx, time_steps, b, f, h](Tape& tp, Tape::Node& nd) {
        Tensor& gx = tp.grad_buffer(sx.id);
        for (int i = 0; i < b; ++i) {
            double* last = gx.data() + (static_cast<size_t>(time_steps - 1) * b + i) * f;
            double* first = gx.data() + static_cast<size_t>(i) * f;
            const double* g = nd.grad.data() + static_cast<size_t>(i) * f;
            for (int j = 0; j < h; ++j) last[j] += g[j];
            for (int j = h; j < f; ++j) first[j] += g[j];
        }
    });
}

// ---- batch normalization ------------------------------------------------------

namespace {
constexpr double kBnEps = 1e-5;
}

Var bn_train(const Var& x, const Var& gamma, const Var& beta, BnBatchStats* batch_out) {
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    const Tensor& B = beta.value();
    if (X.rank() != 2 || G.rank() != 1 || B.rank() != 1 || G.dim(0) != X.cols() || B.dim(0) != X.cols()) {
        throw ShapeError("bn_train: " + shape_str(X) + " with gamma " + shape_str(G) + ", beta " +
                         shape_str(B));
    }
    const int m = X.rows(), f = X.cols();
    Tensor mean({f}), var({f});
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < f; ++j) mean[j] += row[j];
    }
    scale_inplace(mean, 1.0 / m);
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < f; ++j) {
            const double d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    scale_inplace(var, 1.0 / m);
    if (batch_out) {
        batch_out->mean = mean;
        batch_out->var = var;
    }
    auto inv_std = std::make_shared<Tensor>(std::vector<int>{f});
    for (int j = 0; j < f; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + kBnEps);
    auto x_hat = std::make_shared<Tensor>(X.shape());
    Tensor y(X.shape());
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * f;
        double* xh = x_hat->data() + static_cast<size_t>(i) * f;
        double* out = y.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < f; ++j) {
            xh[j] = (row[j] - mean[j]) * (*inv_std)[j];
            out[j] = G[j] * xh[j] + B[j];
        }
    }
    Tape* t = result_tape({&x, &gamma, &beta});
    if (!t) return constant(std::move(y));
    Src sx = src_of(x), sg = src_of(gamma), sb = src_of(beta);
    return t->make(std::move(y), [sx, sg, sb, x_hat, inv_std, m, f](Tape& tp, Tape::Node& nd) {
        const Tensor& G = sg.get(tp);
        // Column sums of g and g*x_hat are shared by all three inputs.
        Tensor sum_g({f}), sum_gx({f});
        for (int i = 0; i < m; ++i) {
            const double* g = nd.grad.data() + static_cast<size_t>(i) * f;
            const double* xh = x_hat->data() + static_cast<size_t>(i) * f;
            for (int j = 0; j < f; ++j) {
                sum_g[j] += g[j];
                sum_gx[j] += g[j] * xh[j];
            }
        }
        if (sb.recorded()) axpy(tp.grad_buffer(sb.id), 1.0, sum_g);
        if (sg.recorded()) axpy(tp.grad_buffer(sg.id), 1.0, sum_gx);
        if (sx.recorded()) {
            Tensor& gx = tp.grad_buffer(sx.id);
            for (int i = 0; i < m; ++i) {
                const double* g = nd.grad.data() + static_cast<size_t>(i) * f;
                const double* xh = x_hat->data() + static_cast<size_t>(i) * f;
                double* dst = gx.data() + static_cast<size_t>(i) * f;
                for (int j = 0; j < f; ++j) {
                    const double coef = G[j] * (*inv_std)[j] / m;
                    dst[j] += coef * (m * g[j] - sum_g[j] - xh[j] * sum_gx[j]);
                }
            }
        }
    });
}

Var bn_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
            const Tensor& running_var) {
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    const Tensor& B = beta.value();
    const int f = X.cols();
    if (running_mean.size() != f || running_var.size() != f || G.size() != f || B.size() != f) {
        throw ShapeError("bn_eval: parameter sizes disagree with " + shape_str(X));
    }
    auto inv_std = std::make_shared<Tensor>(std::vector<int>{f});
    auto mean = std::make_shared<Tensor>(running_mean);
    for (int j = 0; j < f; ++j) (*inv_std)[j] = 1.0 / std::sqrt(running_var[j] + kBnEps);
    const int m = X.rows();
    Tensor y(X.shape());
    for (int i = 0; i < m; ++i) {
        const double* row = X.data() + static_cast<size_t>(i) * f;
        double* out = y.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < f; ++j) out[j] = G[j] * (row[j] - (*mean)[j]) * (*inv_std)[j] + B[j];
    }
    Tape* t = result_tape({&x, &gamma, &beta});
    if (!t) return constant(std::move(y));
    Src sx = src_of(x), sg = src_of(gamma), sb = src_of(beta);
    return t->make(std::move(y), [sx, sg, sb, inv_std, mean, m, f](Tape& tp, Tape::Node& nd) {
        const Tensor& X = sx.get(tp);
        const Tensor& G = sg.get(tp);
        for (int i = 0; i < m; ++i) {
            const double* g = nd.grad.data() + static_cast<size_t>(i) * f;
            const double* row = X.data() + static_cast<size_t>(i) * f;
            if (sx.recorded()) {
                double* dst = tp.grad_buffer(sx.id).data() + static_cast<size_t>(i) * f;
                for (int j = 0; j < f; ++j) dst[j] += g[j] * G[j] * (*inv_std)[j];
            }
            if (sg.recorded()) {
                double* dst = tp.grad_buffer(sg.id).data();
                for (int j = 0; j < f; ++j) dst[j] += g[j] * (row[j] - (*mean)[j]) * (*inv_std)[j];
            }
            if (sb.recorded()) {
                double* dst = tp.grad_buffer(sb.id).data();
                for (int j = 0; j < f; ++j) dst[j] += g[j];
            }
        }
    });
}

// ---- fused GRU ------------------------------------------------------------------

namespace {

std::atomic<bool> g_gru_fp32{false};

// Storage for the backward pass; float in the reduced-precision mode. The
// forward values themselves are always computed in double.
template <typename S>
struct GruDirStash {
    std::vector<S> r, z, n, ghn;  // (B*T x H), stored at time-block positions

    void allocate(size_t cells) {
        r.resize(cells);
        z.resize(cells);
        n.resize(cells);
        ghn.resize(cells);
    }
};

template <typename S>
struct GruStash {
    GruDirStash<S> dir[2];
    int batch = 0, time_steps = 0, hidden = 0, input = 0;
    bool reverse = false;  // single-direction mode only
    Src x;
    Src w_ih[2], b_ih[2], w_hh[2], b_hh[2];
};

// Pointwise GRU gate math for one time step over the whole batch:
//   r = sigmoid(gi_r + gh_r), z = sigmoid(gi_z + gh_z),
//   n = tanh(gi_n + r * gh_n), h = (1 - z) * n + z * h_prev.
// gi rows have stride gi_stride (>= 3H); h is updated in place; gate copies
// go to the (B x H) stash arrays when given.
template <typename S>
void gru_pointwise(const S* gi, int gi_stride, const double* gh, double* h, S* r, S* z, S* n,
                   S* ghn, int batch, int hidden, std::vector<double>& scratch) {
    const int g3 = 3 * hidden;
    const size_t bh = static_cast<size_t>(batch) * hidden;
    scratch.resize(4 * bh);
    double* rz = scratch.data();        // (B x 2H), gate pre-activations then gates
    double* pre_n = rz + 2 * bh;        // (B x H), then tanh output
    double* n_val = pre_n + bh;

    for (int i = 0; i < batch; ++i) {
        const S* gi_row = gi + static_cast<size_t>(i) * gi_stride;
        const double* gh_row = gh + static_cast<size_t>(i) * g3;
        double* dst = rz + static_cast<size_t>(i) * 2 * hidden;
        for (int u = 0; u < 2 * hidden; ++u) dst[u] = static_cast<double>(gi_row[u]) + gh_row[u];
    }
    vsigmoid(rz, rz, static_cast<int>(2 * bh));

    for (int i = 0; i < batch; ++i) {
        const S* gi_row = gi + static_cast<size_t>(i) * gi_stride;
        const double* gh_row = gh + static_cast<size_t>(i) * g3;
        const double* r_row = rz + static_cast<size_t>(i) * 2 * hidden;
        double* dst = pre_n + static_cast<size_t>(i) * hidden;
        for (int u = 0; u < hidden; ++u) {
            dst[u] = static_cast<double>(gi_row[2 * hidden + u]) + r_row[u] * gh_row[2 * hidden + u];
        }
    }
    vtanh(pre_n, n_val, static_cast<int>(bh));

    for (int i = 0; i < batch; ++i) {
        const double* gh_row = gh + static_cast<size_t>(i) * g3;
        const double* r_row = rz + static_cast<size_t>(i) * 2 * hidden;
        const double* z_row = r_row + hidden;
        const double* n_row = n_val + static_cast<size_t>(i) * hidden;
        double* h_row = h + static_cast<size_t>(i) * hidden;
        for (int u = 0; u < hidden; ++u) {
            h_row[u] = (1.0 - z_row[u]) * n_row[u] + z_row[u] * h_row[u];
        }
        if (r) {
            S* r_dst = r + static_cast<size_t>(i) * hidden;
            S* z_dst = z + static_cast<size_t>(i) * hidden;
            S* n_dst = n + static_cast<size_t>(i) * hidden;
            S* ghn_dst = ghn + static_cast<size_t>(i) * hidden;
            for (int u = 0; u < hidden; ++u) {
                r_dst[u] = static_cast<S>(r_row[u]);
                z_dst[u] = static_cast<S>(z_row[u]);
                n_dst[u] = static_cast<S>(n_row[u]);
                ghn_dst[u] = static_cast<S>(gh_row[2 * hidden + u]);
            }
        }
    }
}

// Forward scan of one direction: consumes the projected inputs at column
// offset gi_col (row stride gi_stride), writes hidden states into out at
// column offset out_col (row stride out_stride), and fills the stash when
// given.
template <typename S>
void gru_scan(const S* gi, int gi_stride, int gi_col, const Tensor& w_hh, const Tensor& b_hh,
              bool reverse, int batch, int time_steps, int hidden, GruDirStash<S>* stash,
              double* out, int out_stride, int out_col) {
    const int g3 = 3 * hidden;
    const size_t bh = static_cast<size_t>(batch) * hidden;
    Tensor h({batch, hidden});
    Tensor gh({batch, g3});
    thread_local std::vector<double> pw_scratch;
    for (int s = 0; s < time_steps; ++s) {
        const int tblk = reverse ? (time_steps - 1 - s) : s;
        gemm_nn_bias(h.data(), w_hh.data(), b_hh.data(), gh.data(), batch, hidden, g3);
        const size_t block = static_cast<size_t>(tblk) * bh;
        gru_pointwise<S>(gi + (static_cast<size_t>(tblk) * batch) * gi_stride + gi_col, gi_stride,
                         gh.data(), h.data(), stash ? stash->r.data() + block : nullptr,
                         stash ? stash->z.data() + block : nullptr,
                         stash ? stash->n.data() + block : nullptr,
                         stash ? stash->ghn.data() + block : nullptr, batch, hidden, pw_scratch);
        for (int i = 0; i < batch; ++i) {
            std::copy_n(h.data() + static_cast<size_t>(i) * hidden, hidden,
                        out + (static_cast<size_t>(tblk) * batch + i) * out_stride + out_col);
        }
    }
}

// Backward scan of one direction. Gradients arrive in g_out (row stride
// out_stride, column offset out_col); hidden-state values are read from
// h_all with the same layout. Emits dGI into dgi (row stride gi_stride,
// column offset gi_col), dGH in processing order into dgh_seq (contiguous
// 3H rows), and accumulates both bias gradients.
template <typename S>
void gru_scan_backward(const double* g_out, const double* h_all, int out_stride, int out_col,
                       const GruDirStash<S>& stash, const Tensor& w_hh, bool reverse, int batch,
                       int time_steps, int hidden, double* dgi, int gi_stride, int gi_col,
                       double* dgh_seq, Tensor& db_ih, Tensor& db_hh) {
    const int g3 = 3 * hidden;
    Tensor dh({batch, hidden});
    Tensor dh_rec({batch, hidden});
    for (int s = time_steps - 1; s >= 0; --s) {
        const int tblk = reverse ? (time_steps - 1 - s) : s;
        const int tprev = reverse ? (time_steps - s) : (s - 1);
        for (int i = 0; i < batch; ++i) {
            const size_t row = static_cast<size_t>(tblk) * batch + i;
            const double* g = g_out + row * out_stride + out_col;
            const S* r = stash.r.data() + row * hidden;
            const S* z = stash.z.data() + row * hidden;
            const S* n = stash.n.data() + row * hidden;
            const S* ghn = stash.ghn.data() + row * hidden;
            const double* hp = (s > 0) ? h_all + (static_cast<size_t>(tprev) * batch + i) * out_stride +
                                             out_col
                                       : nullptr;
            double* dgi_row = dgi + row * gi_stride + gi_col;
            double* dgh_row = dgh_seq + (static_cast<size_t>(s) * batch + i) * g3;
            double* dh_row = dh.data() + static_cast<size_t>(i) * hidden;
            for (int u = 0; u < hidden; ++u) {
                const double ru = static_cast<double>(r[u]);
                const double zu = static_cast<double>(z[u]);
                const double nu = static_cast<double>(n[u]);
                const double ghnu = static_cast<double>(ghn[u]);
                const double dtotal = dh_row[u] + g[u];
                const double hprev = hp ? hp[u] : 0.0;
                const double dz = dtotal * (hprev - nu);
                const double dn = dtotal * (1.0 - zu);
                const double dn_pre = dn * (1.0 - nu * nu);
                const double dr = dn_pre * ghnu;
                const double dghn = dn_pre * ru;
                const double dr_pre = dr * ru * (1.0 - ru);
                const double dz_pre = dz * zu * (1.0 - zu);
                dgi_row[u] = dr_pre;
                dgi_row[hidden + u] = dz_pre;
                dgi_row[2 * hidden + u] = dn_pre;
                dgh_row[u] = dr_pre;
                dgh_row[hidden + u] = dz_pre;
                dgh_row[2 * hidden + u] = dghn;
                dh_row[u] = dtotal * zu;  // carried part; recurrent term added below
            }
        }
        // dh += dgh_s * Whh^T
        gemm_nt(dgh_seq + static_cast<size_t>(s) * batch * g3, w_hh.data(), dh_rec.data(), batch,
                g3, hidden, false);
        axpy(dh, 1.0, dh_rec);
        // Bias gradients folded in while the rows are still cache-hot.
        for (int i = 0; i < batch; ++i) {
            const double* gi_row = dgi + (static_cast<size_t>(tblk) * batch + i) * gi_stride + gi_col;
            const double* gh_row = dgh_seq + (static_cast<size_t>(s) * batch + i) * g3;
            for (int j = 0; j < g3; ++j) {
                db_ih[j] += gi_row[j];
                db_hh[j] += gh_row[j];
            }
        }
    }
}

// dWhh = Hprev^T * dGH over processing order; Hprev gathered from the output
// layout.
void gru_whh_grad(const double* h_all, int out_stride, int out_col, const double* dgh_seq,
                  bool reverse, int batch, int time_steps, int hidden, Tensor& dw_hh) {
    const int g3 = 3 * hidden;
    Tensor hprev_seq({batch * time_steps, hidden});
    for (int s = 1; s < time_steps; ++s) {
        const int tprev = reverse ? (time_steps - s) : (s - 1);
        for (int i = 0; i < batch; ++i) {
            std::copy_n(h_all + (static_cast<size_t>(tprev) * batch + i) * out_stride + out_col,
                        hidden,
                        hprev_seq.data() + (static_cast<size_t>(s) * batch + i) * hidden);
        }
    }
    gemm_tn(hprev_seq.data(), dgh_seq, dw_hh.data(), hidden, batch * time_steps, g3, true);
}

void check_gru_shapes(const Tensor& x, const Tensor& w_ih, const Tensor& b_ih, const Tensor& w_hh,
                      const Tensor& b_hh, int batch, int time_steps, int* hidden_out) {
    if (x.rank() != 2 || x.rows() != batch * time_steps || x.cols() != w_ih.rows()) {
        throw ShapeError("gru: input " + shape_str(x) + " vs w_ih " + shape_str(w_ih));
    }
    if (w_ih.cols() % 3 != 0) throw ShapeError("gru: gate width must be 3*H");
    const int hidden = w_ih.cols() / 3;
    const int g3 = 3 * hidden;
    if (w_hh.rows() != hidden || w_hh.cols() != g3 || b_ih.size() != g3 || b_hh.size() != g3) {
        throw ShapeError("gru: recurrent shapes disagree");
    }
    if (*hidden_out != 0 && *hidden_out != hidden) {
        throw ShapeError("gru: directions disagree in hidden size");
    }
    *hidden_out = hidden;
}

template <typename S>
void project_inputs(const double* x, const double* w, const double* bias, S* gi, int m, int k,
                    int n);

template <>
void project_inputs<double>(const double* x, const double* w, const double* bias, double* gi,
                            int m, int k, int n) {
    gemm_nn_bias(x, w, bias, gi, m, k, n);
}

template <>
void project_inputs<float>(const double* x, const double* w, const double* bias, float* gi, int m,
                           int k, int n) {
    gemm_nn_bias_f32out(x, w, bias, gi, m, k, n);
}

template <typename S>
std::vector<S>& gi_buffer() {
    thread_local std::vector<S> buf;
    return buf;
}

template <typename S>
Var gru_direction_impl(const Var& x, const Var& w_ih, const Var& b_ih, const Var& w_hh,
                       const Var& b_hh, int batch, int time_steps, bool reverse) {
    const Tensor& X = x.value();
    const Tensor& Wih = w_ih.value();
    int hidden = 0;
    check_gru_shapes(X, Wih, b_ih.value(), w_hh.value(), b_hh.value(), batch, time_steps, &hidden);
    const int g3 = 3 * hidden;

    Tape* t = result_tape({&x, &w_ih, &b_ih, &w_hh, &b_hh});

    // Input projection for all time steps as one GEMM; reused thread-local
    // scratch since every row is overwritten.
    std::vector<S>& gi_scratch = gi_buffer<S>();
    gi_scratch.resize(static_cast<size_t>(batch) * time_steps * g3);
    S* gi = gi_scratch.data();
    project_inputs<S>(X.data(), Wih.data(), b_ih.value().data(), gi, batch * time_steps, X.cols(),
                      g3);

    auto stash = std::make_shared<GruStash<S>>();
    stash->batch = batch;
    stash->time_steps = time_steps;
    stash->hidden = hidden;
    stash->input = X.cols();
    stash->reverse = reverse;
    if (t) stash->dir[0].allocate(static_cast<size_t>(batch) * time_steps * hidden);

    Tensor h_out({batch * time_steps, hidden});
    gru_scan<S>(gi, g3, 0, w_hh.value(), b_hh.value(), reverse, batch, time_steps, hidden,
                t ? &stash->dir[0] : nullptr, h_out.data(), hidden, 0);

    if (!t) return constant(std::move(h_out));
    stash->x = src_of(x);
    stash->w_ih[0] = src_of(w_ih);
    stash->b_ih[0] = src_of(b_ih);
    stash->w_hh[0] = src_of(w_hh);
    stash->b_hh[0] = src_of(b_hh);

    return t->make(std::move(h_out), [stash](Tape& tp, Tape::Node& nd) {
        const int B = stash->batch, T = stash->time_steps, H = stash->hidden;
        const int g3 = 3 * H;
        const Tensor& Whh = stash->w_hh[0].get(tp);

        // All rows of these buffers are written each pass, so the scratch is
        // reused without re-zeroing.
        thread_local std::vector<double> dgi_scratch, dgh_scratch;
        dgi_scratch.resize(static_cast<size_t>(B) * T * g3);
        dgh_scratch.resize(static_cast<size_t>(B) * T * g3);
        double* dgi = dgi_scratch.data();      // time-block layout
        double* dgh_seq = dgh_scratch.data();  // processing-order layout
        Tensor db_ih({g3}), db_hh({g3});

        gru_scan_backward<S>(nd.grad.data(), nd.value.data(), H, 0, stash->dir[0], Whh,
                             stash->reverse, B, T, H, dgi, g3, 0, dgh_seq, db_ih, db_hh);

        if (stash->w_hh[0].recorded()) {
            gru_whh_grad(nd.value.data(), H, 0, dgh_seq, stash->reverse, B, T, H,
                         tp.grad_buffer(stash->w_hh[0].id));
        }
        if (stash->b_hh[0].recorded()) axpy(tp.grad_buffer(stash->b_hh[0].id), 1.0, db_hh);
        if (stash->b_ih[0].recorded()) axpy(tp.grad_buffer(stash->b_ih[0].id), 1.0, db_ih);
        if (stash->w_ih[0].recorded()) {
            const Tensor& X = stash->x.get(tp);
            gemm_tn(X.data(), dgi, tp.grad_buffer(stash->w_ih[0].id).data(), stash->input, B * T,
                    g3, true);
        }
        if (stash->x.recorded()) {
            const Tensor& Wih = stash->w_ih[0].get(tp);
            bool fresh = false;
            Tensor& dx = tp.grad_buffer(stash->x.id, &fresh);
            gemm_nt(dgi, Wih.data(), dx.data(), B * T, g3, stash->input, !fresh);
        }
    });
}

template <typename S>
Var bigru_layer_impl(const Var& x, const GruDirectionVars& fwd, const GruDirectionVars& bwd,
                     int batch, int time_steps) {
    const Tensor& X = x.value();
    int hidden = 0;
    check_gru_shapes(X, fwd.w_ih.value(), fwd.b_ih.value(), fwd.w_hh.value(), fwd.b_hh.value(),
                     batch, time_steps, &hidden);
    check_gru_shapes(X, bwd.w_ih.value(), bwd.b_ih.value(), bwd.w_hh.value(), bwd.b_hh.value(),
                     batch, time_steps, &hidden);
    const int g3 = 3 * hidden;
    const int g6 = 6 * hidden;
    const int in_dim = X.cols();

    Tape* t = result_tape({&x, &fwd.w_ih, &fwd.b_ih, &fwd.w_hh, &fwd.b_hh, &bwd.w_ih, &bwd.b_ih,
                           &bwd.w_hh, &bwd.b_hh});

    // Both directions' input projections in one pass over x: gi = x * [Wf|Wb]
    // + [bf|bb].
    thread_local std::vector<double> wcat_scratch, bias_scratch;
    wcat_scratch.resize(static_cast<size_t>(in_dim) * g6);
    bias_scratch.resize(static_cast<size_t>(g6));
    for (int i = 0; i < in_dim; ++i) {
        std::copy_n(fwd.w_ih.value().data() + static_cast<size_t>(i) * g3, g3,
                    wcat_scratch.data() + static_cast<size_t>(i) * g6);
        std::copy_n(bwd.w_ih.value().data() + static_cast<size_t>(i) * g3, g3,
                    wcat_scratch.data() + static_cast<size_t>(i) * g6 + g3);
    }
    std::copy_n(fwd.b_ih.value().data(), g3, bias_scratch.data());
    std::copy_n(bwd.b_ih.value().data(), g3, bias_scratch.data() + g3);

    std::vector<S>& gi_scratch = gi_buffer<S>();
    gi_scratch.resize(static_cast<size_t>(batch) * time_steps * g6);
    S* gi = gi_scratch.data();
    project_inputs<S>(X.data(), wcat_scratch.data(), bias_scratch.data(), gi, batch * time_steps,
                      in_dim, g6);

    auto stash = std::make_shared<GruStash<S>>();
    stash->batch = batch;
    stash->time_steps = time_steps;
    stash->hidden = hidden;
    stash->input = in_dim;
    if (t) {
        stash->dir[0].allocate(static_cast<size_t>(batch) * time_steps * hidden);
        stash->dir[1].allocate(static_cast<size_t>(batch) * time_steps * hidden);
    }

    Tensor h_out({batch * time_steps, 2 * hidden});
    gru_scan<S>(gi, g6, 0, fwd.w_hh.value(), fwd.b_hh.value(), /*reverse=*/false, batch,
                time_steps, hidden, t ? &stash->dir[0] : nullptr, h_out.data(), 2 * hidden, 0);
    gru_scan<S>(gi, g6, g3, bwd.w_hh.value(), bwd.b_hh.value(), /*reverse=*/true, batch,
                time_steps, hidden, t ? &stash->dir[1] : nullptr, h_out.data(), 2 * hidden,
                hidden);

    if (!t) return constant(std::move(h_out));
    stash->x = src_of(x);
    stash->w_ih[0] = src_of(fwd.w_ih);
    stash->b_ih[0] = src_of(fwd.b_ih);
    stash->w_hh[0] = src_of(fwd.w_hh);
    stash->b_hh[0] = src_of(fwd.b_hh);
    stash->w_ih[1] = src_of(bwd.w_ih);
    stash->b_ih[1] = src_of(bwd.b_ih);
    stash->w_hh[1] = src_of(bwd.w_hh);
    stash->b_hh[1] = src_of(bwd.b_hh);

    return t->make(std::move(h_out), [stash](Tape& tp, Tape::Node& nd) {
        const int B = stash->batch, T = stash->time_steps, H = stash->hidden;
        const int g3 = 3 * H;
        const int g6 = 6 * H;
        const int in_dim = stash->input;

        thread_local std::vector<double> dgi_scratch, dgh_scratch, dwcat_scratch, wcat_scratch;
        dgi_scratch.resize(static_cast<size_t>(B) * T * g6);
        dgh_scratch.resize(static_cast<size_t>(B) * T * g3);
        double* dgi = dgi_scratch.data();
        double* dgh_seq = dgh_scratch.data();

        for (int d = 0; d < 2; ++d) {
            const bool reverse = d == 1;
            const Tensor& Whh = stash->w_hh[d].get(tp);
            Tensor db_ih({g3}), db_hh({g3});
            gru_scan_backward<S>(nd.grad.data(), nd.value.data(), 2 * H, d * H, stash->dir[d], Whh,
                                 reverse, B, T, H, dgi, g6, d * g3, dgh_seq, db_ih, db_hh);
            if (stash->w_hh[d].recorded()) {
                gru_whh_grad(nd.value.data(), 2 * H, d * H, dgh_seq, reverse, B, T, H,
                             tp.grad_buffer(stash->w_hh[d].id));
            }
            if (stash->b_hh[d].recorded()) axpy(tp.grad_buffer(stash->b_hh[d].id), 1.0, db_hh);
            if (stash->b_ih[d].recorded()) axpy(tp.grad_buffer(stash->b_ih[d].id), 1.0, db_ih);
        }

        // dW = X^T * dGI in one pass, then split by direction.
        const bool need_w = stash->w_ih[0].recorded() || stash->w_ih[1].recorded();
        if (need_w) {
            const Tensor& X = stash->x.get(tp);
            dwcat_scratch.assign(static_cast<size_t>(in_dim) * g6, 0.0);
            gemm_tn(X.data(), dgi, dwcat_scratch.data(), in_dim, B * T, g6, true);
            for (int d = 0; d < 2; ++d) {
                if (!stash->w_ih[d].recorded()) continue;
                Tensor& dst = tp.grad_buffer(stash->w_ih[d].id);
                for (int i = 0; i < in_dim; ++i) {
                    const double* src = dwcat_scratch.data() + static_cast<size_t>(i) * g6 + d * g3;
                    double* out = dst.data() + static_cast<size_t>(i) * g3;
                    for (int j = 0; j < g3; ++j) out[j] += src[j];
                }
            }
        }
        if (stash->x.recorded()) {
            // dX = dGI * [Wf|Wb]^T in one pass.
            wcat_scratch.resize(static_cast<size_t>(in_dim) * g6);
            const Tensor& wf = stash->w_ih[0].get(tp);
            const Tensor& wb = stash->w_ih[1].get(tp);
            for (int i = 0; i < in_dim; ++i) {
                std::copy_n(wf.data() + static_cast<size_t>(i) * g3, g3,
                            wcat_scratch.data() + static_cast<size_t>(i) * g6);
                std::copy_n(wb.data() + static_cast<size_t>(i) * g3, g3,
                            wcat_scratch.data() + static_cast<size_t>(i) * g6 + g3);
            }
            bool fresh = false;
            Tensor& dx = tp.grad_buffer(stash->x.id, &fresh);
            gemm_nt(dgi, wcat_scratch.data(), dx.data(), B * T, g6, in_dim, !fresh);
        }
    });
}

}  // namespace

void set_gru_fp32_storage(bool enabled) { g_gru_fp32.store(enabled); }
bool gru_fp32_storage() { return g_gru_fp32.load(); }

Tensor gru_cell_step(const Tensor& x, const Tensor& h_prev, const Tensor& w_ih, const Tensor& b_ih,
                     const Tensor& w_hh, const Tensor& b_hh) {
    const int batch = x.rows();
    const int hidden = h_prev.cols();
    if (w_ih.cols() != 3 * hidden || w_hh.rows() != hidden || w_hh.cols() != 3 * hidden ||
        b_ih.size() != 3 * hidden || b_hh.size() != 3 * hidden || w_ih.rows() != x.cols() ||
        h_prev.rows() != batch) {
        throw ShapeError("gru_cell_step: inconsistent shapes");
    }
    const int g3 = 3 * hidden;
    Tensor gi({batch, g3});
    gemm_nn_bias(x.data(), w_ih.data(), b_ih.data(), gi.data(), batch, x.cols(), g3);
    Tensor gh({batch, g3});
    gemm_nn_bias(h_prev.data(), w_hh.data(), b_hh.data(), gh.data(), batch, hidden, g3);
    Tensor h = h_prev;
    std::vector<double> scratch;
    gru_pointwise<double>(gi.data(), g3, gh.data(), h.data(), nullptr, nullptr, nullptr, nullptr,
                          batch, hidden, scratch);
    return h;
}

Var gru_direction(const Var& x, const Var& w_ih, const Var& b_ih, const Var& w_hh, const Var& b_hh,
                  int batch, int time_steps, bool reverse) {
    if (gru_fp32_storage()) {
        return gru_direction_impl<float>(x, w_ih, b_ih, w_hh, b_hh, batch, time_steps, reverse);
    }
    return gru_direction_impl<double>(x, w_ih, b_ih, w_hh, b_hh, batch, time_steps, reverse);
}

Var bigru_layer(const Var& x, const GruDirectionVars& fwd, const GruDirectionVars& bwd, int batch,
                int time_steps) {
    if (gru_fp32_storage()) return bigru_layer_impl<float>(x, fwd, bwd, batch, time_steps);
    return bigru_layer_impl<double>(x, fwd, bwd, batch, time_steps);
}

// ---- top-k ---------------------------------------------------------------------

std::pair<Tensor, std::vector<int32_t>> topk(const Tensor& values, int k) {
    if (values.rank() != 1) throw ShapeError("topk: expected a vector, got " + shape_str(values));
    const int n = values.dim(0);
    if (k < 1 || k > n) {
        throw ValueError("topk: K must satisfy 1 <= K <= N, got K=" + std::to_string(k) +
                         ", N=" + std::to_string(n));
    }
    std::vector<int32_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const double* v = values.data();
    // Descending by value, ties broken by the smaller index.
    std::sort(order.begin(), order.end(), [v](int32_t a, int32_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    Tensor out({k});
    for (int i = 0; i < k; ++i) out[i] = v[order[static_cast<size_t>(i)]];
    return {std::move(out), std::move(order)};
}

std::pair<Tensor, IndexMatrix> topk_rows(const Tensor& values, int k) {
    if (values.rank() != 2) throw ShapeError("topk_rows: expected a matrix, got " + shape_str(values));
    const int m = values.rows(), n = values.cols();
    if (k < 1 || k > n) {
        throw ValueError("topk_rows: K must satisfy 1 <= K <= N, got K=" + std::to_string(k) +
                         ", N=" + std::to_string(n));
    }
    Tensor out({m, k});
    IndexMatrix idx{m, k, std::vector<int32_t>(static_cast<size_t>(m) * k)};
    std::vector<int32_t> order(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        const double* v = values.data() + static_cast<size_t>(i) * n;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [v](int32_t a, int32_t b) {
            if (v[a] != v[b]) return v[a] > v[b];
            return a < b;
        });
        for (int c = 0; c < k; ++c) {
            out.at(i, c) = v[order[static_cast<size_t>(c)]];
            idx.idx[static_cast<size_t>(i) * k + c] = order[static_cast<size_t>(c)];
        }
    }
    return {std::move(out), std::move(idx)};
}

}  // namespace cmdskel

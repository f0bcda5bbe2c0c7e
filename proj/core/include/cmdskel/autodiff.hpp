// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cmdskel/tensor.hpp"

namespace cmdskel {

class Tape;

// Handle to a value in a computation. A Var is either a constant (plain
// tensor, never differentiated) or a reference to a tape node. Teacher-side
// quantities enter losses as constants, which makes their stop-gradient
// contract structural rather than a runtime flag.
class Var {
public:
    Var() = default;
    const Tensor& value() const;
    bool defined() const { return tape_ != nullptr || const_ != nullptr; }
    bool recorded() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    std::shared_ptr<const Tensor> holder() const { return const_; }

private:
    friend class Tape;
    friend Var constant(Tensor t);
    friend Var constant(std::shared_ptr<const Tensor> t);

    Tape* tape_ = nullptr;
    int id_ = -1;
    std::shared_ptr<const Tensor> const_;
};

Var constant(Tensor t);
Var constant(std::shared_ptr<const Tensor> t);

// Reverse-mode tape. Nodes are appended in execution order, which is already
// a topological order; backward walks the list once in reverse, so every node
// that influences the loss is visited exactly once.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        std::function<void(Tape&, Node&)> backprop;  // may be empty (leaves)
    };

    Var leaf(Tensor value);
    Var make(Tensor value, std::function<void(Tape&, Node&)> backprop);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node.
    // The loss must be a scalar. A constant loss is accepted and leaves all
    // gradients at zero.
    void backward(const Var& loss);

    // Gradient of the loss w.r.t. a recorded var; zeros if the var did not
    // influence the loss.
    Tensor grad(const Var& v) const;

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor& grad_buffer(int id);
    // As above, but *fresh reports whether the buffer was created (all zero)
    // by this call, letting writers overwrite instead of accumulate.
    Tensor& grad_buffer(int id, bool* fresh);
    size_t size() const { return nodes_.size(); }

private:
    // Deque keeps node references stable while the graph grows; ops hold
    // references to parent values across node creation.
    std::deque<Node> nodes_;
};

// ---- operations -----------------------------------------------------------
//
// Every op computes its value eagerly. If no input is recorded the result is
// a constant and nothing is taped.

struct IndexMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int32_t> idx;  // row-major, rows x cols

    int32_t at(int r, int c) const { return idx[static_cast<size_t>(r) * cols + c]; }
};

Var matmul(const Var& a, const Var& b);     // (m x k) * (k x n)
Var matmul_nt(const Var& a, const Var& b);  // (m x k) * (n x k)^T -> m x n
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_rowvec(const Var& a, const Var& v);  // broadcast v over the rows of a
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, int j0, int j1);
Var square(const Var& a);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var detach(const Var& a);
Var reshaped(const Var& a, std::vector<int> shape);

// Row-wise L2 normalization to unit vectors; rows with norm <= 1e-12 raise
// ValueError.
Var l2_normalize_rows(const Var& x);
Var l2_normalize(const Var& v);  // 1-D convenience

// Temperature softmax over the last axis, stabilized by max subtraction so
// small temperatures (logits / tau up to ~20x) do not overflow.
Var row_softmax(const Var& x, double tau);
Var row_log_softmax(const Var& x, double tau);
Var softmax(const Var& logits, double tau);  // 1-D
Var row_logsumexp(const Var& x);             // (m x n) -> (m)

// KL(p || q) = sum p_i log(p_i / q_i) with 0 log 0 := 0. Inputs must each sum
// to 1 within 1e-6; q_i == 0 where p_i > 0 raises NumericError.
Var kl_div(const Var& p, const Var& q);

// Batch-mean KL with a constant teacher: (1/m) sum_ij P_ij (log P_ij -
// logQ_ij). The teacher is a plain tensor by design; no gradient can reach it.
Var kl_batchmean(const Tensor& teacher_probs, const Var& student_logp);

// Per-row dot products of two (m x d) matrices -> (m).
Var rows_dot(const Var& a, const Var& b);

// Gathers x[r, idx(r, c)] -> (rows x cols of idx). Out-of-range indices raise
// UsageError.
Var gather_cols(const Var& x, const IndexMatrix& idx);
Var select_cols(const Var& x, const std::vector<int32_t>& col_per_row);  // -> (m)

// Temporal pooling over a (B*T x F) time-major block layout.
Var mean_time_blocks(const Var& x, int time_steps);
Var max_time_blocks(const Var& x, int time_steps);
// Final-state pooling for a bidirectional layer output: first half of the
// features from the last block, second half from the first block.
Var bigru_final_block(const Var& x, int time_steps);

// Batch normalization over rows (per-feature statistics).
struct BnBatchStats {
    Tensor mean;
    Tensor var;
};
Var bn_train(const Var& x, const Var& gamma, const Var& beta, BnBatchStats* batch_out = nullptr);
Var bn_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
            const Tensor& running_var);

// One direction of a GRU layer, fused over time. x is (B*T x in) in
// time-major blocks; the result is (B*T x H) with outputs written at their
// original time positions (pass reverse=true for the backward direction).
// Weight layout: w_ih (in x 3H), w_hh (H x 3H), gate order [reset | update |
// candidate]; biases b_ih, b_hh of length 3H.
Var gru_direction(const Var& x, const Var& w_ih, const Var& b_ih, const Var& w_hh,
                  const Var& b_hh, int batch, int time_steps, bool reverse);

struct GruDirectionVars {
    Var w_ih, b_ih, w_hh, b_hh;
};

// Optional reduced-precision mode: the GRU's large intermediate buffers
// (projected gate inputs and the backward stash) are stored as 32-bit floats.
// Meant for training throughput on bandwidth-limited machines; gradient
// checks require the default full-precision mode.
void set_gru_fp32_storage(bool enabled);
bool gru_fp32_storage();

// Full bidirectional GRU layer as one node: equivalent to
// concat_cols(gru_direction(x, fwd, ..., false), gru_direction(x, bwd, ...,
// true)) but with the input projection and its backward taken in a single
// pass over x.
Var bigru_layer(const Var& x, const GruDirectionVars& fwd, const GruDirectionVars& bwd, int batch,
                int time_steps);

// Single GRU step on plain values; the fused node uses the same arithmetic.
// Exposed so the cell equations can be checked in isolation.
Tensor gru_cell_step(const Tensor& x, const Tensor& h_prev, const Tensor& w_ih,
                     const Tensor& b_ih, const Tensor& w_hh, const Tensor& b_hh);

// ---- value-level selection ------------------------------------------------

// Top-K of a 1-D tensor: values in descending order, ties broken by the
// smaller index. K must satisfy 1 <= K <= N.
std::pair<Tensor, std::vector<int32_t>> topk(const Tensor& values, int k);

// Row-wise variant for (m x n) inputs.
std::pair<Tensor, IndexMatrix> topk_rows(const Tensor& values, int k);

}  // namespace cmdskel

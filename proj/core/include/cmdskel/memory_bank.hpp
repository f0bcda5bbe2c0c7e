// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "cmdskel/tensor.hpp"

namespace cmdskel {

// Fixed-capacity FIFO queue of key embeddings. Rows are written at the cursor
// with wraparound, so once full the oldest batch is always overwritten first.
// Each slot can carry the source sample index of its embedding, which lets
// cross-modal index alignment be asserted instead of assumed.
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(int capacity, int dim);

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int filled() const { return filled_; }
    int cursor() const { return cursor_; }
    bool full() const { return filled_ == capacity_ && capacity_ > 0; }

    // All slots, capacity x dim; rows beyond filled() are zero.
    const Tensor& entries() const { return entries_; }

    // Copy of the first filled() rows.
    Tensor filled_entries() const;

    void enqueue(const Tensor& z_k);
    void enqueue(const Tensor& z_k, const std::vector<int64_t>& sources);

    const std::vector<int64_t>& provenance() const { return provenance_; }

    void restore(Tensor entries, int cursor, int filled, std::vector<int64_t> provenance);

private:
    int capacity_ = 0;
    int dim_ = 0;
    int cursor_ = 0;
    int filled_ = 0;
    Tensor entries_;
    std::vector<int64_t> provenance_;  // -1 where never written
};

}  // namespace cmdskel

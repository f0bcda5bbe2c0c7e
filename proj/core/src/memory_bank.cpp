// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/memory_bank.hpp"

#include <algorithm>

namespace cmdskel {

MemoryBank::MemoryBank(int capacity, int dim)
    : capacity_(capacity), dim_(dim), entries_({capacity, dim}),
      provenance_(static_cast<size_t>(capacity), -1) {
    if (capacity < 1 || dim < 1) throw ValueError("memory bank needs capacity >= 1 and dim >= 1");
}

Tensor MemoryBank::filled_entries() const {
    Tensor out({filled_, dim_});
    std::copy_n(entries_.data(), static_cast<size_t>(filled_) * dim_, out.data());
    return out;
}

void MemoryBank::enqueue(const Tensor& z_k) { enqueue(z_k, {}); }

void MemoryBank::enqueue(const Tensor& z_k, const std::vector<int64_t>& sources) {
    if (z_k.rank() != 2 || z_k.cols() != dim_) {
        throw ShapeError("enqueue: batch " + shape_str(z_k) + " vs bank dim " + std::to_string(dim_));
    }
    const int b = z_k.rows();
    if (b > capacity_) {
        throw ValueError("enqueue: batch of " + std::to_string(b) + " exceeds capacity " +
                         std::to_string(capacity_));
    }
    if (!sources.empty() && static_cast<int>(sources.size()) != b) {
        throw UsageError("enqueue: provenance size does not match batch");
    }
    for (int i = 0; i < b; ++i) {
        const int slot = (cursor_ + i) % capacity_;
        std::copy_n(z_k.data() + static_cast<size_t>(i) * dim_, dim_,
                    entries_.data() + static_cast<size_t>(slot) * dim_);
        provenance_[static_cast<size_t>(slot)] = sources.empty() ? -1 : sources[static_cast<size_t>(i)];
    }
    cursor_ = (cursor_ + b) % capacity_;
    filled_ = std::min(filled_ + b, capacity_);
}

void MemoryBank::restore(Tensor entries, int cursor, int filled, std::vector<int64_t> provenance) {
    if (entries.rank() != 2) throw ShapeError("restore: entries must be a matrix");
    capacity_ = entries.rows();
    dim_ = entries.cols();
    if (cursor < 0 || cursor >= capacity_ || filled < 0 || filled > capacity_) {
        throw ValueError("restore: cursor/filled out of range");
    }
    if (provenance.size() != static_cast<size_t>(capacity_)) {
        provenance.assign(static_cast<size_t>(capacity_), -1);
    }
    entries_ = std::move(entries);
    cursor_ = cursor;
    filled_ = filled;
    provenance_ = std::move(provenance);
}

}  // namespace cmdskel

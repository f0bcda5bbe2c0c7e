// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

#include "cmdskel/config.hpp"
#include "cmdskel/memory_bank.hpp"
#include "cmdskel/scl.hpp"

namespace cmdskel {

// Full mutable training state of one modality.
struct ModalityState {
    Modality modality = Modality::kJoint;
    EncoderPair pair;
    std::vector<Tensor> velocity;  // optimizer momenta, trainable order
    MemoryBank bank;
};

// Versioned container: a one-line JSON manifest (config, counters, array
// index) followed by raw little-endian arrays. Reloading reproduces
// subsequent single-threaded training bit-identically.
struct Checkpoint {
    int version = 1;
    TrainConfig config;
    int epoch = 0;             // completed epochs
    long long global_step = 0;
    int joints = 0;
    std::vector<ModalityState> modalities;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

uint64_t file_hash(const std::filesystem::path& path);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "cmdskel/dataset.hpp"

namespace cmdskel {

// Synthetic labeled action dataset. Each class is a parametric motion
// pattern: a class-specific static pose offset plus per-joint sinusoidal
// oscillation with class-specific frequency, direction and phase layout.
// Samples of the same class differ by a per-sample global phase draw and by
// additive coordinate noise.
struct SynthConfig {
    int classes = 5;
    int per_class = 100;
    int frames = 64;
    int joints = 25;
    double noise = 0.05;  // std-dev in meters
    uint64_t seed = 1;
    // First per-class sample index. Two generations with the same seed but
    // disjoint index ranges share class patterns while drawing distinct
    // samples; that is how a train/test split is produced.
    int first_sample = 0;

    void validate() const;
};

Dataset synth_generate(const SynthConfig& cfg);

}  // namespace cmdskel

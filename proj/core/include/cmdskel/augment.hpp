// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "cmdskel/skeleton.hpp"

namespace cmdskel {

// Stochastic skeleton augmentations. Crop-resize always fires; the geometric
// and noise transforms fire independently with the configured probabilities.
struct AugmentConfig {
    int target_frames = 64;
    double crop_min = 0.5;  // crop keeps a uniform fraction in [crop_min, crop_max]
    double crop_max = 1.0;
    double rot_prob = 0.5;
    double rot_max_deg = 17.0;  // per Euler axis
    double shear_prob = 0.5;
    double shear_max = 0.3;  // off-diagonal shear factors
    double jitter_prob = 0.5;
    double jitter_sigma = 0.01;  // meters, per coordinate

    void validate() const;
};

// Pure function of (sequence, seed, config): the same seed always yields a
// bit-identical view. Output temporal length is cfg.target_frames.
SkeletonSequence augment(const SkeletonSequence& seq, uint64_t seed, const AugmentConfig& cfg);

}  // namespace cmdskel

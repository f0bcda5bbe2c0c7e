// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/synth.hpp"

#include <cmath>

#include "cmdskel/rng.hpp"

namespace cmdskel {

void SynthConfig::validate() const {
    if (classes < 1 || per_class < 1 || frames < 1 || joints < 1) {
        throw ValueError("synth: classes, per_class, frames and joints must all be >= 1");
    }
    if (noise < 0) throw ValueError("synth: noise must be >= 0");
    if (first_sample < 0) throw ValueError("synth: first_sample must be >= 0");
}

namespace {

constexpr double kTwoPi = 6.283185307179586476925;

// Rough humanoid rest pose for the first 25 joints; extra joints (if any)
// fan out from the last defined position.
void rest_position(int j, double* xyz) {
    static const double kPose[25][3] = {
        {0.00, 0.90, 0.00},   // pelvis
        {0.00, 1.15, 0.00},   // spine_mid
        {0.00, 1.45, 0.00},   // neck
        {0.00, 1.60, 0.00},   // head
        {-0.20, 1.40, 0.00},  // l_shoulder
        {-0.45, 1.25, 0.00},  // l_elbow
        {-0.65, 1.05, 0.00},  // l_wrist
        {-0.72, 0.98, 0.02},  // l_hand
        {0.20, 1.40, 0.00},   // r_shoulder
        {0.45, 1.25, 0.00},   // r_elbow
        {0.65, 1.05, 0.00},   // r_wrist
        {0.72, 0.98, 0.02},   // r_hand
        {-0.10, 0.85, 0.00},  // l_hip
        {-0.12, 0.50, 0.00},  // l_knee
        {-0.13, 0.10, 0.00},  // l_ankle
        {-0.13, 0.02, 0.12},  // l_foot
        {0.10, 0.85, 0.00},   // r_hip
        {0.12, 0.50, 0.00},   // r_knee
        {0.13, 0.10, 0.00},   // r_ankle
        {0.13, 0.02, 0.12},   // r_foot
        {0.00, 1.35, 0.00},   // spine_upper
        {-0.78, 0.94, 0.03},  // l_hand_tip
        {-0.74, 0.95, 0.06},  // l_thumb
        {0.78, 0.94, 0.03},   // r_hand_tip
        {0.74, 0.95, 0.06},   // r_thumb
    };
    if (j < 25) {
        xyz[0] = kPose[j][0];
        xyz[1] = kPose[j][1];
        xyz[2] = kPose[j][2];
    } else {
        xyz[0] = 0.05 * (j - 24);
        xyz[1] = 1.0;
        xyz[2] = 0.05 * (j - 24);
    }
}

struct ClassPattern {
    std::vector<double> offset;     // J x 3 static pose offset
    std::vector<double> amplitude;  // J
    std::vector<double> phase;      // J
    std::vector<double> axis;       // J x 3 unit directions
    double frequency = 1.0;         // cycles per clip
};

ClassPattern make_pattern(int cls, int joints, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x636c73u, static_cast<uint64_t>(cls)));
    ClassPattern p;
    p.offset.resize(static_cast<size_t>(joints) * 3);
    p.amplitude.resize(static_cast<size_t>(joints));
    p.phase.resize(static_cast<size_t>(joints));
    p.axis.resize(static_cast<size_t>(joints) * 3);
    // Distinct per-class frequency keeps the motion view informative.
    p.frequency = 0.75 + 0.5 * cls;
    for (int j = 0; j < joints; ++j) {
        for (int c = 0; c < 3; ++c) {
            p.offset[static_cast<size_t>(j) * 3 + c] = 0.22 * (2.0 * rng.uniform() - 1.0);
        }
        p.amplitude[static_cast<size_t>(j)] = rng.uniform(0.06, 0.22);
        p.phase[static_cast<size_t>(j)] = rng.uniform(0.0, kTwoPi);
        double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
        const double nrm = std::sqrt(ax * ax + ay * ay + az * az) + 1e-12;
        p.axis[static_cast<size_t>(j) * 3 + 0] = ax / nrm;
        p.axis[static_cast<size_t>(j) * 3 + 1] = ay / nrm;
        p.axis[static_cast<size_t>(j) * 3 + 2] = az / nrm;
    }
    return p;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.joints = cfg.joints;

    std::vector<ClassPattern> patterns;
    patterns.reserve(static_cast<size_t>(cfg.classes));
    for (int c = 0; c < cfg.classes; ++c) patterns.push_back(make_pattern(c, cfg.joints, cfg.seed));

    for (int c = 0; c < cfg.classes; ++c) {
        const ClassPattern& p = patterns[static_cast<size_t>(c)];
        for (int s = 0; s < cfg.per_class; ++s) {
            Rng rng(derive_seed(cfg.seed, 0x736d70u, static_cast<uint64_t>(c),
                                static_cast<uint64_t>(cfg.first_sample + s)));
            const double sample_phase = rng.uniform(0.0, kTwoPi);
            SkeletonSequence seq(cfg.frames, cfg.joints);
            seq.label = c;
            for (int t = 0; t < cfg.frames; ++t) {
                const double tt = static_cast<double>(t) / cfg.frames;
                for (int j = 0; j < cfg.joints; ++j) {
                    double rest[3];
                    rest_position(j, rest);
                    const double wave =
                        p.amplitude[static_cast<size_t>(j)] *
                        std::sin(kTwoPi * p.frequency * tt + p.phase[static_cast<size_t>(j)] +
                                 sample_phase);
                    for (int coord = 0; coord < 3; ++coord) {
                        double v = rest[coord] + p.offset[static_cast<size_t>(j) * 3 + coord] +
                                   wave * p.axis[static_cast<size_t>(j) * 3 + coord];
                        if (cfg.noise > 0) v += cfg.noise * rng.normal();
                        seq.at(t, 0, j, coord) = v;
                    }
                    // second actor stays zero (single-actor data)
                }
            }
            ds.items.push_back(std::move(seq));
        }
    }
    return ds;
}

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/augment.hpp"

#include <algorithm>
#include <cmath>

#include "cmdskel/rng.hpp"

namespace cmdskel {

void AugmentConfig::validate() const {
    if (target_frames < 1) throw ValueError("augment: target_frames must be >= 1");
    if (!(crop_min > 0.0) || crop_min > crop_max || crop_max > 1.0) {
        throw ValueError("augment: need 0 < crop_min <= crop_max <= 1");
    }
    if (rot_prob < 0 || rot_prob > 1 || shear_prob < 0 || shear_prob > 1 || jitter_prob < 0 ||
        jitter_prob > 1) {
        throw ValueError("augment: probabilities must lie in [0, 1]");
    }
    if (rot_max_deg < 0 || shear_max < 0 || jitter_sigma < 0) {
        throw ValueError("augment: magnitudes must be >= 0");
    }
}

namespace {

// 3x3 * xyz applied to every joint of every actor.
void apply_linear(SkeletonSequence& seq, const double m[3][3]) {
    for (int t = 0; t < seq.frames(); ++t) {
        double* f = seq.frame_data(t);
        const size_t n = static_cast<size_t>(SkeletonSequence::kActors) * seq.joints();
        for (size_t p = 0; p < n; ++p) {
            double* v = f + p * 3;
            const double x = v[0], y = v[1], z = v[2];
            v[0] = m[0][0] * x + m[0][1] * y + m[0][2] * z;
            v[1] = m[1][0] * x + m[1][1] * y + m[1][2] * z;
            v[2] = m[2][0] * x + m[2][1] * y + m[2][2] * z;
        }
    }
}

void rotation_matrix(double ax, double ay, double az, double out[3][3]) {
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    // R = Rz * Ry * Rx
    const double r00 = cz * cy;
    const double r01 = cz * sy * sx - sz * cx;
    const double r02 = cz * sy * cx + sz * sx;
    const double r10 = sz * cy;
    const double r11 = sz * sy * sx + cz * cx;
    const double r12 = sz * sy * cx - cz * sx;
    const double r20 = -sy;
    const double r21 = cy * sx;
    const double r22 = cy * cx;
    out[0][0] = r00; out[0][1] = r01; out[0][2] = r02;
    out[1][0] = r10; out[1][1] = r11; out[1][2] = r12;
    out[2][0] = r20; out[2][1] = r21; out[2][2] = r22;
}

}  // namespace

SkeletonSequence augment(const SkeletonSequence& seq, uint64_t seed, const AugmentConfig& cfg) {
    cfg.validate();
    if (seq.frames() < 1) throw ValueError("augment: empty sequence");
    Rng rng(seed);

    // Temporal crop, always applied, then resize to the target length.
    const int t_in = seq.frames();
    const double frac = rng.uniform(cfg.crop_min, cfg.crop_max);
    int keep = std::max(1, static_cast<int>(std::lround(frac * t_in)));
    keep = std::min(keep, t_in);
    const int start = (t_in > keep) ? static_cast<int>(rng.below(static_cast<uint64_t>(t_in - keep + 1)))
                                    : 0;
    SkeletonSequence cropped(keep, seq.joints());
    cropped.label = seq.label;
    cropped.subject = seq.subject;
    const size_t frame = static_cast<size_t>(SkeletonSequence::kActors) * seq.joints() * 3;
    for (int t = 0; t < keep; ++t) {
        const double* src = seq.frame_data(start + t);
        std::copy_n(src, frame, cropped.frame_data(t));
    }
    SkeletonSequence out = resize_temporal(cropped, cfg.target_frames);

    if (rng.uniform() < cfg.rot_prob) {
        const double lim = cfg.rot_max_deg * 3.14159265358979323846 / 180.0;
        const double ax = rng.uniform(-lim, lim);
        const double ay = rng.uniform(-lim, lim);
        const double az = rng.uniform(-lim, lim);
        double rot[3][3];
        rotation_matrix(ax, ay, az, rot);
        apply_linear(out, rot);
    }

    if (rng.uniform() < cfg.shear_prob) {
        double sh[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        sh[0][1] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        sh[0][2] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        sh[1][0] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        sh[1][2] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        sh[2][0] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        sh[2][1] = rng.uniform(-cfg.shear_max, cfg.shear_max);
        apply_linear(out, sh);
    }

    if (rng.uniform() < cfg.jitter_prob && cfg.jitter_sigma > 0.0) {
        // An absent (all-zero) actor must stay all-zero through augmentation.
        bool actor_present[SkeletonSequence::kActors] = {false, false};
        for (int t = 0; t < out.frames(); ++t) {
            for (int a = 0; a < SkeletonSequence::kActors; ++a) {
                for (int j = 0; j < out.joints() && !actor_present[a]; ++j) {
                    for (int c = 0; c < 3; ++c) {
                        if (out.at(t, a, j, c) != 0.0) {
                            actor_present[a] = true;
                            break;
                        }
                    }
                }
            }
        }
        for (int t = 0; t < out.frames(); ++t) {
            for (int a = 0; a < SkeletonSequence::kActors; ++a) {
                for (int j = 0; j < out.joints(); ++j) {
                    for (int c = 0; c < 3; ++c) {
                        const double noise = cfg.jitter_sigma * rng.normal();
                        if (actor_present[a]) out.at(t, a, j, c) += noise;
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace cmdskel

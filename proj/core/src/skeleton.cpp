// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/skeleton.hpp"

#include <cmath>

namespace cmdskel {

void SkeletonTopology::validate() const {
    const int j = joint_count();
    if (j < 1) throw ValueError("topology must have at least one joint");
    for (int i = 0; i < j; ++i) {
        if (parent[static_cast<size_t>(i)] < 0 || parent[static_cast<size_t>(i)] >= j) {
            throw ValueError("topology parent index out of range at joint " + std::to_string(i));
        }
        // Walk to a root; a chain longer than j joints means a cycle.
        int cur = i;
        int steps = 0;
        while (parent[static_cast<size_t>(cur)] != cur) {
            cur = parent[static_cast<size_t>(cur)];
            if (++steps > j) throw ValueError("topology contains a cycle at joint " + std::to_string(i));
        }
    }
}

SkeletonTopology SkeletonTopology::human25() {
    SkeletonTopology t;
    // 0 pelvis, 1 mid-spine, 2 neck, 3 head, 4-7 left arm, 8-11 right arm,
    // 12-15 left leg, 16-19 right leg, 20 upper spine, 21-22 left hand tips,
    // 23-24 right hand tips.
    t.parent = {0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11};
    t.names = {"pelvis",      "spine_mid",  "neck",        "head",         "l_shoulder",
               "l_elbow",     "l_wrist",    "l_hand",      "r_shoulder",   "r_elbow",
               "r_wrist",     "r_hand",     "l_hip",       "l_knee",       "l_ankle",
               "l_foot",      "r_hip",      "r_knee",      "r_ankle",      "r_foot",
               "spine_upper", "l_hand_tip", "l_thumb",     "r_hand_tip",   "r_thumb"};
    t.validate();
    return t;
}

Modality parse_modality(const std::string& s) {
    if (s == "joint") return Modality::kJoint;
    if (s == "motion") return Modality::kMotion;
    if (s == "bone") return Modality::kBone;
    throw ValueError("unknown modality '" + s + "' (expected joint|motion|bone)");
}

std::string to_string(Modality m) {
    switch (m) {
        case Modality::kJoint: return "joint";
        case Modality::kMotion: return "motion";
        case Modality::kBone: return "bone";
    }
    return "joint";
}

SkeletonSequence to_motion(const SkeletonSequence& seq) {
    const int t_len = seq.frames();
    if (t_len < 2) throw ValueError("to_motion: needs at least 2 frames, got " + std::to_string(t_len));
    SkeletonSequence out(t_len, seq.joints());
    out.label = seq.label;
    out.subject = seq.subject;
    const size_t frame = static_cast<size_t>(SkeletonSequence::kActors) * seq.joints() * 3;
    for (int t = 0; t < t_len - 1; ++t) {
        const double* cur = seq.frame_data(t);
        const double* nxt = seq.frame_data(t + 1);
        double* dst = out.frame_data(t);
        for (size_t i = 0; i < frame; ++i) dst[i] = nxt[i] - cur[i];
    }
    // last frame stays zero
    return out;
}

SkeletonSequence to_bone(const SkeletonSequence& seq, const SkeletonTopology& topo) {
    if (topo.joint_count() != seq.joints()) {
        throw ShapeError("to_bone: topology has " + std::to_string(topo.joint_count()) +
                         " joints, sequence has " + std::to_string(seq.joints()));
    }
    SkeletonSequence out(seq.frames(), seq.joints());
    out.label = seq.label;
    out.subject = seq.subject;
    for (int t = 0; t < seq.frames(); ++t) {
        for (int a = 0; a < SkeletonSequence::kActors; ++a) {
            for (int j = 0; j < seq.joints(); ++j) {
                const int p = topo.parent[static_cast<size_t>(j)];
                for (int c = 0; c < 3; ++c) {
                    out.at(t, a, j, c) = seq.at(t, a, j, c) - seq.at(t, a, p, c);
                }
            }
        }
    }
    return out;
}

SkeletonSequence derive_modality(const SkeletonSequence& seq, Modality m,
                                 const SkeletonTopology& topo) {
    switch (m) {
        case Modality::kJoint: return seq;
        case Modality::kMotion: return to_motion(seq);
        case Modality::kBone: return to_bone(seq, topo);
    }
    return seq;
}

SkeletonSequence resize_temporal(const SkeletonSequence& seq, int target_frames) {
    if (target_frames < 1) throw ValueError("resize_temporal: target length must be >= 1");
    if (seq.frames() < 1) throw ValueError("resize_temporal: empty sequence");
    const int t_in = seq.frames();
    SkeletonSequence out(target_frames, seq.joints());
    out.label = seq.label;
    out.subject = seq.subject;
    const size_t frame = static_cast<size_t>(SkeletonSequence::kActors) * seq.joints() * 3;
    for (int t = 0; t < target_frames; ++t) {
        double pos = 0.0;
        if (target_frames > 1 && t_in > 1) {
            pos = static_cast<double>(t) * (t_in - 1) / (target_frames - 1);
        }
        const int lo = static_cast<int>(pos);
        const int hi = std::min(lo + 1, t_in - 1);
        const double w = pos - lo;
        const double* a = seq.frame_data(lo);
        const double* b = seq.frame_data(hi);
        double* dst = out.frame_data(t);
        if (w == 0.0) {
            for (size_t i = 0; i < frame; ++i) dst[i] = a[i];
        } else {
            for (size_t i = 0; i < frame; ++i) dst[i] = a[i] + w * (b[i] - a[i]);
        }
    }
    return out;
}

Tensor flatten_batch(const std::vector<const SkeletonSequence*>& batch) {
    if (batch.empty()) throw UsageError("flatten_batch: empty batch");
    const int b = static_cast<int>(batch.size());
    const int t_len = batch[0]->frames();
    const int joints = batch[0]->joints();
    const int feat = SkeletonSequence::kActors * joints * 3;
    for (const SkeletonSequence* s : batch) {
        if (s->frames() != t_len || s->joints() != joints) {
            throw ShapeError("flatten_batch: sequences disagree in T or J");
        }
    }
    Tensor out({b * t_len, feat});
    for (int t = 0; t < t_len; ++t) {
        for (int i = 0; i < b; ++i) {
            const double* src = batch[static_cast<size_t>(i)]->frame_data(t);
            double* dst = out.data() + (static_cast<size_t>(t) * b + i) * feat;
            for (int f = 0; f < feat; ++f) dst[f] = src[f];
        }
    }
    return out;
}

}  // namespace cmdskel

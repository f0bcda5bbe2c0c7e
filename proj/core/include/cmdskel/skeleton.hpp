// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cmdskel/error.hpp"
#include "cmdskel/tensor.hpp"

namespace cmdskel {

// Always-two-actor skeleton clip: T x 2 x J x 3 coordinates in meters. A
// missing second actor is all zeros.
class SkeletonSequence {
public:
    static constexpr int kActors = 2;

    SkeletonSequence() = default;
    SkeletonSequence(int frames, int joints)
        : frames_(frames), joints_(joints),
          data_(static_cast<size_t>(frames) * kActors * joints * 3, 0.0) {}

    int frames() const { return frames_; }
    int joints() const { return joints_; }

    double& at(int t, int a, int j, int c) {
        return data_[idx(t, a, j, c)];
    }
    double at(int t, int a, int j, int c) const { return data_[idx(t, a, j, c)]; }

    double* frame_data(int t) { return data_.data() + idx(t, 0, 0, 0); }
    const double* frame_data(int t) const { return data_.data() + idx(t, 0, 0, 0); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    std::optional<int> label;
    std::optional<int> subject;

private:
    size_t idx(int t, int a, int j, int c) const {
        return ((static_cast<size_t>(t) * kActors + a) * joints_ + j) * 3 + c;
    }

    int frames_ = 0;
    int joints_ = 0;
    std::vector<double> data_;
};

// Per-joint parent indices; roots point to themselves. Needed to derive the
// bone view of a sequence.
struct SkeletonTopology {
    std::vector<int> parent;
    std::vector<std::string> names;  // optional, may be empty

    int joint_count() const { return static_cast<int>(parent.size()); }
    void validate() const;  // forest check: parent chains terminate at a root

    // 25-joint humanoid tree (spine + head + two arms + two legs).
    static SkeletonTopology human25();
};

enum class Modality { kJoint, kMotion, kBone };

Modality parse_modality(const std::string& s);
std::string to_string(Modality m);

// Forward temporal differences, last frame zero-padded; output length equals
// the input length. Requires T >= 2.
SkeletonSequence to_motion(const SkeletonSequence& seq);

// Child minus parent along the topology; root bones are zero.
SkeletonSequence to_bone(const SkeletonSequence& seq, const SkeletonTopology& topo);

SkeletonSequence derive_modality(const SkeletonSequence& seq, Modality m,
                                 const SkeletonTopology& topo);

// Linear interpolation along time to exactly target_frames; first and last
// frames are preserved bit-exactly.
SkeletonSequence resize_temporal(const SkeletonSequence& seq, int target_frames);

// Flattens sequences (all with equal T and J) into a (B*T x 2*J*3) matrix in
// time-major blocks: row t*B + b holds frame t of sequence b.
Tensor flatten_batch(const std::vector<const SkeletonSequence*>& batch);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

#include "cmdskel/skeleton.hpp"

namespace cmdskel {

struct Dataset {
    int joints = 0;
    std::vector<SkeletonSequence> items;

    size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
    int num_classes() const;  // 1 + max label; 0 when unlabeled
};

// JSON-lines dataset format. First line is a header
//   {"format":"cmd-skel","version":1,"joints":J,"actors":2}
// followed by one record per line:
//   {"label":int|null,"subject":int|null,"frames":[[[x,y,z] x J] x 2] x T}
// A zero-byte file reads as an empty dataset.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);

}  // namespace cmdskel

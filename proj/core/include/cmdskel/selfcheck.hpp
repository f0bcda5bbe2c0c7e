// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmdskel {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Oracle suites runnable without any dataset: distribution and top-k checks,
// queue semantics, momentum arithmetic, gradient checks on a small instance,
// stop-gradient contract, and the positive-mining degeneracy (with its
// negative control). Used by the `verify` CLI verb.
std::vector<CheckResult> run_self_checks(uint64_t seed);

}  // namespace cmdskel

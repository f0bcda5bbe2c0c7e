// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmdskel/checkpoint.hpp"
#include "cmdskel/dataset.hpp"

namespace cmdskel {

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v
void sgd_update(Tensor& param, Tensor& velocity, const Tensor& grad, double lr, double momentum,
                double weight_decay);

double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct StepMetrics {
    int epoch = 0;
    long long step = 0;  // global step index (1-based after the step ran)
    double lr = 0.0;
    double loss_total = 0.0;
    bool any_loss = false;  // false during bank warm-up
    std::vector<std::pair<std::string, double>> terms;
};

using StepSink = std::function<void(const StepMetrics&)>;

struct TrainState {
    TrainConfig cfg;
    SkeletonTopology topo;
    int joints = 0;
    int epoch = 0;
    long long global_step = 0;
    std::vector<ModalityState> mods;
};

TrainState init_train_state(const TrainConfig& cfg, int joints);
TrainState state_from_checkpoint(const Checkpoint& ckpt);
Checkpoint to_checkpoint(const TrainState& state);

// One optimization step over the given sample indices. All modality batches
// are derived from the same source samples in the same order; with
// debug_provenance on, bank alignment is asserted after the enqueues.
StepMetrics train_step(TrainState& state, const Dataset& data, std::span<const int> sample_indices);

struct FitResult {
    std::filesystem::path checkpoint_path;
    std::filesystem::path metrics_path;
    int epochs_run = 0;
};

// Epoch loop with step-decay learning rate; writes one metrics CSV row per
// epoch and a final checkpoint (plus periodic ones at checkpoint_every).
FitResult fit(TrainState& state, const Dataset& data, const std::filesystem::path& out_dir,
              const StepSink& sink = nullptr);

// Metric column names for a config: loss_scl_<mod>..., loss_cmd_<a>_<b>...
std::vector<std::string> metric_names(const TrainConfig& cfg);

}  // namespace cmdskel

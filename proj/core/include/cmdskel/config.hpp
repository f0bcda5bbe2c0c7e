// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmdskel/augment.hpp"
#include "cmdskel/cmd.hpp"
#include "cmdskel/encoder.hpp"
#include "cmdskel/skeleton.hpp"

namespace cmdskel {

// Every pre-training hyperparameter. Field names double as config file keys
// and CLI flag names; defaults are the full-scale settings, desk-scale runs
// override them (see configs/desk.conf).
struct TrainConfig {
    std::string modalities = "joint,motion,bone";
    double tau_c = 0.07;
    double tau_t = 0.05;
    double tau_s = 0.1;
    int K = 8192;      // distillation neighbors
    int N = 16384;     // memory bank capacity
    double alpha = 0.999;
    int batch_size = 64;
    double lr = 0.01;
    double sgd_momentum = 0.9;
    double weight_decay = 0.0001;
    int epochs = 450;
    int lr_drop_epoch = 350;
    double lr_drop_factor = 0.1;
    uint64_t seed = 1;

    int hidden_dim = 1024;
    int embedding_dim = 128;
    int temporal_length = 64;
    std::string pooling = "mean";

    bool shared_aug_seed = true;  // same augmentation draw for every modality of a sample
    double cmd_weight = 1.0;
    // Store the recurrent layers' large intermediates in single precision
    // during training. Forward math stays double; gradient checks need this
    // off (the default).
    bool train_fp32_storage = false;
    int threads = 0;          // 0 = hardware concurrency; 1 = fully single-threaded
    int checkpoint_every = 0;  // epochs between periodic checkpoints; 0 = final only
    bool debug_provenance = false;

    double aug_crop_min = 0.5;
    double aug_crop_max = 1.0;
    double aug_rot_prob = 0.5;
    double aug_rot_max_deg = 17.0;
    double aug_shear_prob = 0.5;
    double aug_shear_max = 0.3;
    double aug_jitter_prob = 0.5;
    double aug_jitter_sigma = 0.01;

    void validate() const;

    std::vector<Modality> modality_list() const;
    std::vector<std::pair<Modality, Modality>> modality_pairs() const;  // all unordered pairs
    AugmentConfig augment_config() const;
    EncoderConfig encoder_config(int joints) const;
    CmdConfig cmd_config() const;
};

// Key/value access used by the config file parser, CLI overrides and the run
// manifest. Unknown keys and unparsable values raise ValueError.
const std::vector<std::string>& config_keys();
std::string config_get(const TrainConfig& cfg, const std::string& key);
void config_set(TrainConfig& cfg, const std::string& key, const std::string& value);

// Plain-text config: one `key = value` per line, '#' starts a comment.
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);
std::string config_text(const TrainConfig& cfg);  // canonical form, all keys
uint64_t config_hash(const TrainConfig& cfg);

std::string hash_hex(uint64_t h);
uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull);

}  // namespace cmdskel

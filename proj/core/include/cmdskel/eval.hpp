// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cmdskel/checkpoint.hpp"
#include "cmdskel/dataset.hpp"

namespace cmdskel {

// Frozen features of a dataset: unit-norm rows plus labels.
struct FeatureSet {
    Tensor features;  // (M x d)
    std::vector<int> labels;
    std::string source;  // dataset id + checkpoint hash

    int size() const { return features.rank() == 2 ? features.rows() : 0; }
    int dim() const { return features.rank() == 2 ? features.cols() : 0; }
};

// Eval-mode query-encoder embeddings for every sample of the dataset.
// Sequences are resized to the configured temporal length; no augmentation.
FeatureSet extract_features(const Checkpoint& ckpt, const Dataset& data, Modality modality,
                            int batch = 64);

// 1-nearest-neighbor top-1 accuracy in cosine space. Ties resolve to the
// smallest training index. No self-exclusion: if the same set is passed as
// train and test, each sample trivially finds itself.
double knn_eval(const FeatureSet& train, const FeatureSet& test);

struct ProbeConfig {
    int epochs = 80;
    double lr = 0.1;
    int drop1 = 50;  // lr * 0.1 from here
    int drop2 = 70;  // lr * 0.01 from here
    double momentum = 0.9;
    int batch_size = 64;
    uint64_t seed = 0;
};

struct ProbeModel {
    Tensor w;  // (d x C)
    Tensor b;  // (C)
};

// Softmax cross-entropy linear classifier on frozen features.
ProbeModel train_linear_probe(const FeatureSet& train, int num_classes, const ProbeConfig& cfg);
Tensor probe_scores(const ProbeModel& model, const Tensor& features);  // (M x C)
double accuracy_from_scores(const Tensor& scores, const std::vector<int>& labels);

double linear_probe(const Checkpoint& ckpt, const Dataset& train, const Dataset& test,
                    Modality modality, const ProbeConfig& cfg);

// Fuses per-modality class scores by unweighted sum, then takes the argmax.
double ensemble_scores(std::span<const Tensor> per_modality_scores,
                       const std::vector<int>& labels);

// Feature file: header {"format":"cmd-feat","version":1,"dim":d} then one
// {"label":int,"vec":[...]} JSON line per sample.
void save_features(const std::filesystem::path& path, const FeatureSet& fs);
FeatureSet load_features(const std::filesystem::path& path);

}  // namespace cmdskel

// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cmdskel/autodiff.hpp"
#include "cmdskel/rng.hpp"
#include "cmdskel/trainer.hpp"

namespace cmdskel {

using nlohmann::json;

FeatureSet extract_features(const Checkpoint& ckpt, const Dataset& data, Modality modality,
                            int batch) {
    const ModalityState* ms = nullptr;
    for (const ModalityState& cand : ckpt.modalities) {
        if (cand.modality == modality) ms = &cand;
    }
    if (!ms) {
        throw UsageError("extract_features: checkpoint has no '" + to_string(modality) +
                         "' encoder");
    }
    if (batch < 1) throw ValueError("extract_features: batch must be >= 1");
    if (data.joints != ckpt.joints && !data.empty()) {
        throw ShapeError("extract_features: dataset has " + std::to_string(data.joints) +
                         " joints, checkpoint expects " + std::to_string(ckpt.joints));
    }

    SkeletonTopology topo = SkeletonTopology::human25();
    if (topo.joint_count() != ckpt.joints) {
        topo.parent.assign(static_cast<size_t>(ckpt.joints), 0);
        for (int j = 0; j < ckpt.joints; ++j) topo.parent[static_cast<size_t>(j)] = std::max(0, j - 1);
        topo.names.clear();
    }
    const int t_len = ckpt.config.temporal_length;

    FeatureSet fs;
    fs.features = Tensor({static_cast<int>(data.size()), ckpt.config.embedding_dim});
    fs.source = "dataset(" + std::to_string(data.size()) + ")";
    // Running statistics stay untouched in eval mode, but encode() takes the
    // owner by mutable reference; work on a copy to keep the checkpoint const.
    EncoderParams query = ms->pair.query;
    // Features are a pure function of (checkpoint, dataset): always extract
    // at full precision regardless of the training storage mode.
    const bool fp32_mode = gru_fp32_storage();
    set_gru_fp32_storage(false);

    const int n = static_cast<int>(data.size());
    for (int start = 0; start < n; start += batch) {
        const int b = std::min(batch, n - start);
        std::vector<SkeletonSequence> prepared;
        prepared.reserve(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i) {
            const SkeletonSequence& raw = data.items[static_cast<size_t>(start + i)];
            prepared.push_back(
                derive_modality(resize_temporal(raw, t_len), modality, topo));
        }
        std::vector<const SkeletonSequence*> ptrs;
        for (const auto& s : prepared) ptrs.push_back(&s);
        const Tensor x = flatten_batch(ptrs);
        const Tensor z = encode_values(query, x, b, t_len, {/*train=*/false, false});
        std::copy_n(z.data(), static_cast<size_t>(b) * z.cols(),
                    fs.features.data() + static_cast<size_t>(start) * z.cols());
    }
    set_gru_fp32_storage(fp32_mode);
    for (const SkeletonSequence& s : data.items) fs.labels.push_back(s.label.value_or(-1));
    return fs;
}

double knn_eval(const FeatureSet& train, const FeatureSet& test) {
    if (train.size() < 1 || test.size() < 1) throw UsageError("knn_eval: empty feature set");
    if (train.dim() != test.dim()) {
        throw ShapeError("knn_eval: feature dims disagree, " + std::to_string(train.dim()) + " vs " +
                         std::to_string(test.dim()));
    }
    const Tensor sims = matmul_nt_val(test.features, train.features);  // (M_test x M_train)
    int correct = 0;
    for (int i = 0; i < test.size(); ++i) {
        const double* row = sims.data() + static_cast<size_t>(i) * train.size();
        int best = 0;
        for (int j = 1; j < train.size(); ++j) {
            if (row[j] > row[best]) best = j;  // strict: ties keep the smaller index
        }
        if (train.labels[static_cast<size_t>(best)] == test.labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / test.size();
}

ProbeModel train_linear_probe(const FeatureSet& train, int num_classes, const ProbeConfig& cfg) {
    if (train.size() < 1) throw UsageError("train_linear_probe: empty feature set");
    if (num_classes < 2) throw ValueError("train_linear_probe: need at least two classes");
    for (int l : train.labels) {
        if (l < 0 || l >= num_classes) throw UsageError("train_linear_probe: label out of range");
    }
    const int d = train.dim();
    const int n = train.size();
    const int batch = std::min(cfg.batch_size, n);

    ProbeModel model;
    Rng rng(derive_seed(cfg.seed, 0x70726fu));
    model.w = Tensor({d, num_classes});
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (int64_t i = 0; i < model.w.size(); ++i) model.w[i] = rng.uniform(-bound, bound);
    model.b = Tensor({num_classes});

    Tensor vel_w(model.w.shape()), vel_b(model.b.shape());
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        if (epoch >= cfg.drop2) {
            lr = cfg.lr * 0.01;
        } else if (epoch >= cfg.drop1) {
            lr = cfg.lr * 0.1;
        }
        Rng shuffle_rng(derive_seed(cfg.seed, 0x70736866u, static_cast<uint64_t>(epoch)));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.below(static_cast<uint64_t>(i) + 1));
            std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }
        for (int start = 0; start + batch <= n; start += batch) {
            Tensor xb({batch, d});
            std::vector<int32_t> yb(static_cast<size_t>(batch));
            for (int i = 0; i < batch; ++i) {
                const int src = perm[static_cast<size_t>(start + i)];
                std::copy_n(train.features.data() + static_cast<size_t>(src) * d, d,
                            xb.data() + static_cast<size_t>(i) * d);
                yb[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
            }
            Tape tape;
            Var w = tape.leaf(model.w);
            Var b = tape.leaf(model.b);
            Var logits = add_rowvec(matmul(constant(std::move(xb)), w), b);
            Var loss = mean_all(sub(row_logsumexp(logits), select_cols(logits, yb)));
            tape.backward(loss);
            sgd_update(model.w, vel_w, tape.grad(w), lr, cfg.momentum, 0.0);
            sgd_update(model.b, vel_b, tape.grad(b), lr, cfg.momentum, 0.0);
        }
    }
    return model;
}

Tensor probe_scores(const ProbeModel& model, const Tensor& features) {
    Tensor scores = matmul_val(features, model.w);
    for (int i = 0; i < scores.rows(); ++i) {
        for (int j = 0; j < scores.cols(); ++j) scores.at(i, j) += model.b[j];
    }
    return scores;
}

double accuracy_from_scores(const Tensor& scores, const std::vector<int>& labels) {
    if (scores.rows() != static_cast<int>(labels.size())) {
        throw UsageError("accuracy_from_scores: row/label count mismatch");
    }
    int correct = 0;
    for (int i = 0; i < scores.rows(); ++i) {
        const double* row = scores.data() + static_cast<size_t>(i) * scores.cols();
        int best = 0;
        for (int j = 1; j < scores.cols(); ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == labels[static_cast<size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / scores.rows();
}

double linear_probe(const Checkpoint& ckpt, const Dataset& train, const Dataset& test,
                    Modality modality, const ProbeConfig& cfg) {
    for (const SkeletonSequence& s : train.items) {
        if (!s.label) throw UsageError("linear_probe: training data has unlabeled samples");
    }
    for (const SkeletonSequence& s : test.items) {
        if (!s.label) throw UsageError("linear_probe: test data has unlabeled samples");
    }
    FeatureSet ftr = extract_features(ckpt, train, modality);
    FeatureSet fte = extract_features(ckpt, test, modality);
    const int classes = std::max(train.num_classes(), test.num_classes());
    ProbeModel model = train_linear_probe(ftr, classes, cfg);
    return accuracy_from_scores(probe_scores(model, fte.features), fte.labels);
}

double ensemble_scores(std::span<const Tensor> per_modality_scores,
                       const std::vector<int>& labels) {
    if (per_modality_scores.empty()) throw UsageError("ensemble_scores: no score matrices");
    Tensor fused = per_modality_scores[0];
    for (size_t i = 1; i < per_modality_scores.size(); ++i) {
        if (!fused.same_shape(per_modality_scores[i])) {
            throw UsageError("ensemble_scores: misaligned score matrices");
        }
        axpy(fused, 1.0, per_modality_scores[i]);
    }
    return accuracy_from_scores(fused, labels);
}

void save_features(const std::filesystem::path& path, const FeatureSet& fs) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write features to " + path.string());
    json header = {{"format", "cmd-feat"}, {"version", 1}, {"dim", fs.dim()}};
    out << header.dump() << "\n";
    for (int i = 0; i < fs.size(); ++i) {
        json rec;
        rec["label"] = fs.labels[static_cast<size_t>(i)];
        json vec = json::array();
        for (int j = 0; j < fs.dim(); ++j) vec.push_back(fs.features.at(i, j));
        rec["vec"] = std::move(vec);
        out << rec.dump() << "\n";
    }
    if (!out) throw IoError("failed while writing " + path.string());
}

FeatureSet load_features(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open features file " + path.string());
    std::string line;
    size_t line_no = 0;
    int dim = -1;
    std::vector<double> flat;
    FeatureSet fs;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (dim < 0) {
            if (j.value("format", "") != "cmd-feat" || j.value("version", 0) != 1) {
                throw ParseError(path.string() + ": expected a cmd-feat version-1 header");
            }
            dim = j.value("dim", 0);
            if (dim < 1) throw ParseError(path.string() + ": bad feature dim");
            continue;
        }
        const auto& vec = j.at("vec");
        if (static_cast<int>(vec.size()) != dim) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": wrong vector length");
        }
        for (const auto& v : vec) flat.push_back(v.get<double>());
        fs.labels.push_back(j.value("label", -1));
    }
    if (dim < 0) dim = 0;
    fs.features = Tensor({static_cast<int>(fs.labels.size()), dim}, std::move(flat));
    return fs;
}

}  // namespace cmdskel

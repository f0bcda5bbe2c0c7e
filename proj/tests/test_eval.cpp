// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>

#include "cmdskel/eval.hpp"
#include "cmdskel/synth.hpp"
#include "cmdskel/trainer.hpp"
#include "test_helpers.hpp"

using namespace cmdskel;
namespace fs = std::filesystem;

namespace {

FeatureSet make_features(const Tensor& rows, std::vector<int> labels) {
    FeatureSet fs;
    fs.features = rows;
    fs.labels = std::move(labels);
    return fs;
}

Checkpoint tiny_checkpoint(uint64_t seed) {
    SynthConfig sc;
    sc.classes = 2;
    sc.per_class = 6;
    sc.frames = 8;
    sc.joints = 4;
    sc.noise = 0.02;
    sc.seed = seed;
    Dataset data = synth_generate(sc);
    TrainConfig cfg;
    cfg.modalities = "joint,motion";
    cfg.K = 4;
    cfg.N = 8;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.lr_drop_epoch = 0;
    cfg.hidden_dim = 6;
    cfg.embedding_dim = 6;
    cfg.temporal_length = 8;
    cfg.threads = 1;
    cfg.seed = seed;
    TrainState st = init_train_state(cfg, data.joints);
    const fs::path dir = fs::temp_directory_path() / ("cmdskel-eval-" + std::to_string(::getpid()));
    fit(st, data, dir);
    Checkpoint ckpt = load_checkpoint(dir / "checkpoint.ckpt");
    fs::remove_all(dir);
    return ckpt;
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("knn_eval") {
    SUBCASE("test == train gives accuracy 1 (no self-exclusion)") {
        Tensor rows = testutil::random_unit_rows(10, 6, 1);
        FeatureSet a = make_features(rows, {0, 1, 2, 0, 1, 2, 0, 1, 2, 0});
        CHECK(knn_eval(a, a) == 1.0);
    }
    SUBCASE("orthogonal one-per-class set classifies itself perfectly") {
        Tensor rows({4, 4});
        for (int i = 0; i < 4; ++i) rows.at(i, i) = 1.0;
        FeatureSet a = make_features(rows, {0, 1, 2, 3});
        CHECK(knn_eval(a, a) == 1.0);
    }
    SUBCASE("random 50-sample instance matches the brute-force oracle") {
        Tensor train_rows = testutil::random_unit_rows(50, 8, 2);
        Tensor test_rows = testutil::random_unit_rows(50, 8, 3);
        std::vector<int> train_labels, test_labels;
        Rng rng(4);
        for (int i = 0; i < 50; ++i) {
            train_labels.push_back(static_cast<int>(rng.below(5)));
            test_labels.push_back(static_cast<int>(rng.below(5)));
        }
        FeatureSet tr = make_features(train_rows, train_labels);
        FeatureSet te = make_features(test_rows, test_labels);
        const double got = knn_eval(tr, te);
        int correct = 0;
        for (int i = 0; i < 50; ++i) {
            int best = 0;
            double best_s = -2.0;
            for (int j = 0; j < 50; ++j) {
                double s = 0.0;
                for (int c = 0; c < 8; ++c) s += test_rows.at(i, c) * train_rows.at(j, c);
                if (s > best_s) {  // strictly greater keeps the smaller index on ties
                    best_s = s;
                    best = j;
                }
            }
            if (train_labels[static_cast<size_t>(best)] == test_labels[static_cast<size_t>(i)]) {
                ++correct;
            }
        }
        CHECK(got == doctest::Approx(correct / 50.0).epsilon(1e-12));
    }
    SUBCASE("cosine preserved under a common rotation") {
        Tensor train_rows = testutil::random_unit_rows(30, 4, 5);
        Tensor test_rows = testutil::random_unit_rows(20, 4, 6);
        std::vector<int> train_labels, test_labels;
        Rng rng(7);
        for (int i = 0; i < 30; ++i) train_labels.push_back(static_cast<int>(rng.below(3)));
        for (int i = 0; i < 20; ++i) test_labels.push_back(static_cast<int>(rng.below(3)));
        const double before = knn_eval(make_features(train_rows, train_labels),
                                       make_features(test_rows, test_labels));
        // Random orthogonal transform via Gram-Schmidt on a random matrix.
        Tensor m = testutil::random_tensor({4, 4}, 8);
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < i; ++j) {
                double d = 0.0;
                for (int c = 0; c < 4; ++c) d += m.at(i, c) * m.at(j, c);
                for (int c = 0; c < 4; ++c) m.at(i, c) -= d * m.at(j, c);
            }
            double n = 0.0;
            for (int c = 0; c < 4; ++c) n += m.at(i, c) * m.at(i, c);
            for (int c = 0; c < 4; ++c) m.at(i, c) /= std::sqrt(n);
        }
        const double after = knn_eval(make_features(matmul_nt_val(train_rows, m), train_labels),
                                      make_features(matmul_nt_val(test_rows, m), test_labels));
        CHECK(before == doctest::Approx(after).epsilon(1e-12));
    }
    SUBCASE("dimension mismatch is a schema error") {
        FeatureSet a = make_features(testutil::random_unit_rows(3, 4, 9), {0, 1, 2});
        FeatureSet b = make_features(testutil::random_unit_rows(3, 5, 10), {0, 1, 2});
        CHECK_THROWS_AS(knn_eval(a, b), ShapeError);
    }
}

TEST_CASE("linear probe") {
    SUBCASE("linearly separable two-class features reach accuracy 1") {
        const int n = 40;
        Tensor rows({n, 3});
        std::vector<int> labels;
        Rng rng(11);
        for (int i = 0; i < n; ++i) {
            const int cls = i % 2;
            rows.at(i, 0) = (cls ? 1.0 : -1.0) + 0.05 * rng.normal();
            rows.at(i, 1) = rng.normal() * 0.1;
            rows.at(i, 2) = 0.3;
            labels.push_back(cls);
        }
        FeatureSet fs_train = make_features(rows, labels);
        ProbeConfig pc;
        pc.epochs = 30;
        pc.batch_size = 8;
        ProbeModel model = train_linear_probe(fs_train, 2, pc);
        CHECK(accuracy_from_scores(probe_scores(model, rows), labels) == 1.0);
    }
    SUBCASE("permuted labels score near chance") {
        const int n = 200, classes = 4;
        Tensor rows = testutil::random_unit_rows(n, 8, 12);
        std::vector<int> labels;
        Rng rng(13);
        for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(classes)));
        ProbeConfig pc;
        pc.epochs = 20;
        ProbeModel model = train_linear_probe(make_features(rows, labels), classes, pc);
        // Fresh random features with fresh random labels: nothing to learn.
        Tensor test_rows = testutil::random_unit_rows(n, 8, 14);
        std::vector<int> test_labels;
        for (int i = 0; i < n; ++i) test_labels.push_back(static_cast<int>(rng.below(classes)));
        const double acc = accuracy_from_scores(probe_scores(model, test_rows), test_labels);
        CHECK(acc > 0.25 - 0.10);
        CHECK(acc < 0.25 + 0.10);
    }
    SUBCASE("one-hot features reproduce the label lookup") {
        const int classes = 5;
        Tensor rows({classes * 6, classes});
        std::vector<int> labels;
        for (int i = 0; i < classes * 6; ++i) {
            rows.at(i, i % classes) = 1.0;
            labels.push_back(i % classes);
        }
        ProbeConfig pc;
        pc.epochs = 25;
        pc.batch_size = 10;
        ProbeModel model = train_linear_probe(make_features(rows, labels), classes, pc);
        CHECK(accuracy_from_scores(probe_scores(model, rows), labels) == 1.0);
    }
    SUBCASE("missing labels are a usage error") {
        FeatureSet fs_bad = make_features(testutil::random_unit_rows(4, 3, 15), {0, -1, 1, 0});
        ProbeConfig pc;
        CHECK_THROWS_AS(train_linear_probe(fs_bad, 2, pc), UsageError);
    }
}

TEST_CASE("ensemble_scores") {
    Tensor s1({4, 3});
    std::vector<int> labels{0, 1, 2, 1};
    for (int i = 0; i < 4; ++i) s1.at(i, labels[static_cast<size_t>(i)]) = 2.0;
    SUBCASE("single modality is the identity") {
        std::vector<Tensor> mats{s1};
        CHECK(ensemble_scores(mats, labels) == 1.0);
    }
    SUBCASE("duplicated modality keeps the argmax (positive-scale invariance)") {
        std::vector<Tensor> mats{s1, s1};
        CHECK(ensemble_scores(mats, labels) == accuracy_from_scores(s1, labels));
        Tensor scaled = s1;
        scale_inplace(scaled, 3.5);
        std::vector<Tensor> scaled_mats{scaled, scaled};
        CHECK(ensemble_scores(scaled_mats, labels) == accuracy_from_scores(s1, labels));
    }
    SUBCASE("three-modality fusion matches a manual sum") {
        Tensor a = testutil::random_tensor({6, 4}, 16);
        Tensor b = testutil::random_tensor({6, 4}, 17);
        Tensor c = testutil::random_tensor({6, 4}, 18);
        std::vector<int> lab{0, 1, 2, 3, 0, 1};
        Tensor manual = a;
        axpy(manual, 1.0, b);
        axpy(manual, 1.0, c);
        std::vector<Tensor> mats{a, b, c};
        CHECK(ensemble_scores(mats, lab) == accuracy_from_scores(manual, lab));
    }
    SUBCASE("misaligned scores are a usage error") {
        std::vector<Tensor> mats{s1, Tensor({3, 3})};
        CHECK_THROWS_AS(ensemble_scores(mats, labels), UsageError);
    }
}

TEST_CASE("extract_features") {
    Checkpoint ckpt = tiny_checkpoint(21);
    SynthConfig sc;
    sc.classes = 2;
    sc.per_class = 3;
    sc.frames = 10;  // resized to the checkpoint's temporal length internally
    sc.joints = 4;
    sc.noise = 0.02;
    sc.seed = 22;
    Dataset data = synth_generate(sc);

    SUBCASE("deterministic unit-norm features with labels") {
        FeatureSet a = extract_features(ckpt, data, Modality::kJoint);
        FeatureSet b = extract_features(ckpt, data, Modality::kJoint);
        REQUIRE(a.size() == 6);
        CHECK(testutil::max_abs_diff(a.features, b.features) == 0.0);
        for (int i = 0; i < a.size(); ++i) {
            double n = 0.0;
            for (int c = 0; c < a.dim(); ++c) n += a.features.at(i, c) * a.features.at(i, c);
            CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
        }
        CHECK(a.labels == std::vector<int>{0, 0, 0, 1, 1, 1});
    }
    SUBCASE("empty dataset gives an empty feature set") {
        Dataset empty;
        empty.joints = ckpt.joints;
        FeatureSet fs_out = extract_features(ckpt, empty, Modality::kJoint);
        CHECK(fs_out.size() == 0);
    }
    SUBCASE("a modality missing from the checkpoint is a usage error") {
        CHECK_THROWS_AS(extract_features(ckpt, data, Modality::kBone), UsageError);
    }
    SUBCASE("probing never mutates the checkpoint parameters") {
        const fs::path dir = fs::temp_directory_path() /
                             ("cmdskel-eval-mut-" + std::to_string(::getpid()));
        fs::create_directories(dir);
        save_checkpoint(dir / "before.ckpt", ckpt);
        const uint64_t before = file_hash(dir / "before.ckpt");
        ProbeConfig pc;
        pc.epochs = 3;
        pc.batch_size = 3;
        linear_probe(ckpt, data, data, Modality::kJoint, pc);
        save_checkpoint(dir / "after.ckpt", ckpt);
        CHECK(file_hash(dir / "after.ckpt") == before);
        fs::remove_all(dir);
    }
    SUBCASE("feature file round trip") {
        FeatureSet a = extract_features(ckpt, data, Modality::kJoint);
        const fs::path dir = fs::temp_directory_path() /
                             ("cmdskel-eval-io-" + std::to_string(::getpid()));
        fs::create_directories(dir);
        save_features(dir / "f.jsonl", a);
        FeatureSet back = load_features(dir / "f.jsonl");
        REQUIRE(back.size() == a.size());
        REQUIRE(back.dim() == a.dim());
        CHECK(back.labels == a.labels);
        CHECK(testutil::max_abs_diff(back.features, a.features) == 0.0);
        fs::remove_all(dir);
    }
}

TEST_SUITE_END();

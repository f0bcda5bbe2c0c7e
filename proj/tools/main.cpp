// SPDX-License-Identifier: Apache-2.0
//
// cmdskel: pre-train skeleton action representations with single-modal
// momentum contrast plus cross-modal mutual distillation, then evaluate the
// frozen features (KNN / linear probe), all on JSON-lines datasets.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmdskel/eval.hpp"
#include "cmdskel/selfcheck.hpp"
#include "cmdskel/synth.hpp"
#include "cmdskel/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_json(const cmdskel::TrainConfig& cfg) {
    json out = json::object();
    for (const std::string& key : cmdskel::config_keys()) {
        out[key] = cmdskel::config_get(cfg, key);
    }
    return out;
}

void write_manifest(const fs::path& out_dir, const std::string& verb, const json& details) {
    json manifest;
    manifest["verb"] = verb;
    manifest.update(details);
    std::ofstream out(out_dir / "run-manifest.json");
    if (!out) throw cmdskel::IoError("cannot write run-manifest.json in " + out_dir.string());
    out << manifest.dump(2) << "\n";
}

void write_result(const fs::path& out_dir, const json& result) {
    std::ofstream out(out_dir / "result.json");
    if (!out) throw cmdskel::IoError("cannot write result.json in " + out_dir.string());
    out << result.dump(2) << "\n";
}

struct PretrainArgs {
    std::string dataset;
    std::string config_path;
    std::string out_dir;
    std::map<std::string, std::string> overrides;  // key -> raw value
};

int run_pretrain(const PretrainArgs& args) {
    cmdskel::TrainConfig cfg;
    if (!args.config_path.empty()) cmdskel::apply_config_file(cfg, args.config_path);
    for (const auto& [key, value] : args.overrides) cmdskel::config_set(cfg, key, value);
    cfg.validate();

    cmdskel::Dataset data = cmdskel::load_dataset(args.dataset);
    if (data.empty()) throw cmdskel::UsageError("pretrain: dataset is empty");

    const fs::path out_dir(args.out_dir);
    fs::create_directories(out_dir);
    write_manifest(out_dir, "pretrain",
                   {{"dataset", args.dataset},
                    {"config_file", args.config_path},
                    {"config", config_json(cfg)},
                    {"config_hash", cmdskel::hash_hex(cmdskel::config_hash(cfg))}});

    cmdskel::TrainState state = cmdskel::init_train_state(cfg, data.joints);
    cmdskel::FitResult res = cmdskel::fit(state, data, out_dir);
    std::cout << "checkpoint: " << res.checkpoint_path.string() << "\n"
              << "metrics:    " << res.metrics_path.string() << "\n";
    return 0;
}

int run_eval(const std::string& protocol, const std::string& ckpt_path,
             const std::string& train_path, const std::string& test_path,
             const std::string& modality_name, const fs::path& out_dir,
             const cmdskel::ProbeConfig& probe) {
    const cmdskel::Checkpoint ckpt = cmdskel::load_checkpoint(ckpt_path);
    const cmdskel::Dataset train = cmdskel::load_dataset(train_path);
    const cmdskel::Dataset test = cmdskel::load_dataset(test_path);
    const cmdskel::Modality modality = cmdskel::parse_modality(modality_name);

    double top1 = 0.0;
    if (protocol == "knn") {
        cmdskel::FeatureSet ftr = cmdskel::extract_features(ckpt, train, modality);
        cmdskel::FeatureSet fte = cmdskel::extract_features(ckpt, test, modality);
        top1 = cmdskel::knn_eval(ftr, fte);
    } else {
        top1 = cmdskel::linear_probe(ckpt, train, test, modality, probe);
    }

    fs::create_directories(out_dir);
    json result = {{"protocol", protocol},
                   {"modality", modality_name},
                   {"top1", top1},
                   {"n_test", static_cast<int>(test.size())},
                   {"checkpoint", cmdskel::hash_hex(cmdskel::file_hash(ckpt_path))}};
    write_result(out_dir, result);
    write_manifest(out_dir, "eval-" + protocol,
                   {{"checkpoint", ckpt_path},
                    {"train_dataset", train_path},
                    {"test_dataset", test_path},
                    {"modality", modality_name},
                    {"config", config_json(ckpt.config)}});
    std::cout.setf(std::ios::fixed);
    std::cout.precision(4);
    std::cout << "top1 " << top1 << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"skeleton action representation learning with cross-modal mutual distillation"};
    app.require_subcommand(1);

    std::function<int()> action;

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic labeled dataset");
    cmdskel::SynthConfig synth_cfg;
    std::string gen_out;
    std::string gen_name = "dataset.jsonl";
    int gen_test_per_class = 0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--classes", synth_cfg.classes, "number of classes");
    gen->add_option("--per-class", synth_cfg.per_class, "samples per class");
    gen->add_option("--frames", synth_cfg.frames, "frames per sequence");
    gen->add_option("--joints", synth_cfg.joints, "joints per actor");
    gen->add_option("--noise", synth_cfg.noise, "coordinate noise std-dev (meters)");
    gen->add_option("--seed", synth_cfg.seed, "generator seed");
    gen->add_option("--file-name", gen_name, "dataset file name inside --out");
    gen->add_option("--test-per-class", gen_test_per_class,
                    "also write test.jsonl with this many held-out samples per class");
    gen->callback([&] {
        action = [&]() -> int {
            const fs::path out_dir(gen_out);
            fs::create_directories(out_dir);
            cmdskel::Dataset ds = cmdskel::synth_generate(synth_cfg);
            const fs::path file = out_dir / gen_name;
            cmdskel::save_dataset(file, ds);
            if (gen_test_per_class > 0) {
                cmdskel::SynthConfig test_cfg = synth_cfg;
                test_cfg.per_class = gen_test_per_class;
                test_cfg.first_sample = synth_cfg.per_class;
                cmdskel::save_dataset(out_dir / "test.jsonl", cmdskel::synth_generate(test_cfg));
            }
            write_manifest(out_dir, "gen-synth",
                           {{"classes", synth_cfg.classes},
                            {"per_class", synth_cfg.per_class},
                            {"frames", synth_cfg.frames},
                            {"joints", synth_cfg.joints},
                            {"noise", synth_cfg.noise},
                            {"seed", synth_cfg.seed},
                            {"test_per_class", gen_test_per_class},
                            {"output", file.string()}});
            std::cout << "wrote " << ds.size() << " sequences to " << file.string() << "\n";
            return 0;
        };
    });

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "run self-supervised pre-training");
    PretrainArgs pre_args;
    pre->add_option("--dataset", pre_args.dataset, "training dataset (cmd-skel JSON lines)")
        ->required();
    pre->add_option("--out", pre_args.out_dir, "output directory")->required();
    pre->add_option("--config", pre_args.config_path, "key = value config file");
    std::map<std::string, std::string> override_storage;
    for (const std::string& key : cmdskel::config_keys()) {
        pre->add_option("--" + key, override_storage[key], "override config key " + key);
    }
    pre->callback([&] {
        for (const std::string& key : cmdskel::config_keys()) {
            if (pre->count("--" + key) > 0) pre_args.overrides[key] = override_storage[key];
        }
        action = [&]() { return run_pretrain(pre_args); };
    });

    // eval-knn / eval-linear
    std::string ev_ckpt, ev_train, ev_test, ev_modality = "joint", ev_out;
    cmdskel::ProbeConfig probe_cfg;
    for (const std::string protocol : {"knn", "linear"}) {
        auto* ev = app.add_subcommand("eval-" + protocol,
                                      protocol == "knn" ? "1-NN cosine evaluation of frozen features"
                                                        : "linear probe on frozen features");
        ev->add_option("--checkpoint", ev_ckpt, "pre-trained checkpoint")->required();
        ev->add_option("--train-dataset", ev_train, "labeled training split")->required();
        ev->add_option("--test-dataset", ev_test, "labeled test split")->required();
        ev->add_option("--modality", ev_modality, "joint|motion|bone");
        ev->add_option("--out", ev_out, "output directory")->required();
        if (protocol == "linear") {
            ev->add_option("--probe-epochs", probe_cfg.epochs, "probe epochs");
            ev->add_option("--probe-lr", probe_cfg.lr, "probe learning rate");
            ev->add_option("--probe-drop1", probe_cfg.drop1, "first lr drop epoch");
            ev->add_option("--probe-drop2", probe_cfg.drop2, "second lr drop epoch");
            ev->add_option("--probe-batch", probe_cfg.batch_size, "probe batch size");
            ev->add_option("--probe-seed", probe_cfg.seed, "probe seed");
        }
        const std::string proto = protocol;
        ev->callback([&, proto] {
            action = [&, proto]() {
                return run_eval(proto, ev_ckpt, ev_train, ev_test, ev_modality, ev_out, probe_cfg);
            };
        });
    }

    // export-features
    auto* ex = app.add_subcommand("export-features", "write frozen features as cmd-feat JSON lines");
    std::string ex_ckpt, ex_dataset, ex_modality = "joint", ex_out;
    std::string ex_name = "features.jsonl";
    ex->add_option("--checkpoint", ex_ckpt, "pre-trained checkpoint")->required();
    ex->add_option("--dataset", ex_dataset, "dataset to embed")->required();
    ex->add_option("--modality", ex_modality, "joint|motion|bone");
    ex->add_option("--out", ex_out, "output directory")->required();
    ex->add_option("--file-name", ex_name, "feature file name inside --out");
    ex->callback([&] {
        action = [&]() -> int {
            const cmdskel::Checkpoint ckpt = cmdskel::load_checkpoint(ex_ckpt);
            const cmdskel::Dataset data = cmdskel::load_dataset(ex_dataset);
            cmdskel::FeatureSet fs_out =
                cmdskel::extract_features(ckpt, data, cmdskel::parse_modality(ex_modality));
            const fs::path out_dir(ex_out);
            fs::create_directories(out_dir);
            cmdskel::save_features(out_dir / ex_name, fs_out);
            write_manifest(out_dir, "export-features",
                           {{"checkpoint", ex_ckpt},
                            {"dataset", ex_dataset},
                            {"modality", ex_modality},
                            {"output", (out_dir / ex_name).string()},
                            {"config", config_json(ckpt.config)}});
            std::cout << "wrote " << fs_out.size() << " feature rows to "
                      << (out_dir / ex_name).string() << "\n";
            return 0;
        };
    });

    // verify
    auto* ver = app.add_subcommand("verify", "run the built-in oracle suites");
    uint64_t verify_seed = 7;
    ver->add_option("--seed", verify_seed, "seed for the randomized checks");
    ver->callback([&] {
        action = [&]() -> int {
            const std::vector<cmdskel::CheckResult> results = cmdskel::run_self_checks(verify_seed);
            bool all_ok = true;
            for (const cmdskel::CheckResult& r : results) {
                std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.name << ": " << r.detail
                          << "\n";
                all_ok = all_ok && r.passed;
            }
            std::cout << (all_ok ? "all checks passed" : "CHECKS FAILED") << "\n";
            return all_ok ? 0 : 1;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        return action ? action() : 2;
    } catch (const cmdskel::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}

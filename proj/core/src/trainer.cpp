// SPDX-License-Identifier: Apache-2.0
#include "cmdskel/trainer.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "cmdskel/cmd.hpp"
#include "cmdskel/rng.hpp"

namespace cmdskel {

void sgd_update(Tensor& param, Tensor& velocity, const Tensor& grad, double lr, double momentum,
                double weight_decay) {
    check_same_shape(param, grad, "sgd_update");
    check_same_shape(param, velocity, "sgd_update");
    for (int64_t i = 0; i < param.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    return epoch >= cfg.lr_drop_epoch ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
}

TrainState init_train_state(const TrainConfig& cfg, int joints) {
    cfg.validate();
    if (joints < 1) throw ValueError("init_train_state: joints must be >= 1");
    TrainState st;
    st.cfg = cfg;
    st.topo = SkeletonTopology::human25();
    if (st.topo.joint_count() != joints) {
        // Non-25-joint data: fall back to a chain topology so the bone view
        // stays well defined.
        st.topo.parent.assign(static_cast<size_t>(joints), 0);
        for (int j = 0; j < joints; ++j) st.topo.parent[static_cast<size_t>(j)] = std::max(0, j - 1);
        st.topo.names.clear();
        st.topo.validate();
    }
    st.joints = joints;
    const EncoderConfig enc = cfg.encoder_config(joints);
    const std::vector<Modality> mods = cfg.modality_list();
    for (size_t i = 0; i < mods.size(); ++i) {
        ModalityState ms;
        ms.modality = mods[i];
        ms.pair = make_encoder_pair(enc, derive_seed(cfg.seed, 0x6d6f64u, i), cfg.alpha);
        ms.pair.query.for_each_trainable(
            [&](const std::string&, Tensor& t) { ms.velocity.emplace_back(t.shape()); });
        ms.bank = MemoryBank(cfg.N, cfg.embedding_dim);
        st.mods.push_back(std::move(ms));
    }
    return st;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
    ckpt.config.validate();
    TrainState st;
    st.cfg = ckpt.config;
    st.topo = SkeletonTopology::human25();
    if (st.topo.joint_count() != ckpt.joints) {
        st.topo.parent.assign(static_cast<size_t>(ckpt.joints), 0);
        for (int j = 0; j < ckpt.joints; ++j) st.topo.parent[static_cast<size_t>(j)] = std::max(0, j - 1);
        st.topo.names.clear();
    }
    st.joints = ckpt.joints;
    st.epoch = ckpt.epoch;
    st.global_step = ckpt.global_step;
    st.mods = ckpt.modalities;
    return st;
}

Checkpoint to_checkpoint(const TrainState& state) {
    Checkpoint ckpt;
    ckpt.config = state.cfg;
    ckpt.epoch = state.epoch;
    ckpt.global_step = state.global_step;
    ckpt.joints = state.joints;
    ckpt.modalities = state.mods;
    return ckpt;
}

std::vector<std::string> metric_names(const TrainConfig& cfg) {
    std::vector<std::string> names;
    for (const Modality m : cfg.modality_list()) names.push_back("loss_scl_" + to_string(m));
    for (const auto& [a, b] : cfg.modality_pairs()) {
        names.push_back("loss_cmd_" + to_string(a) + "_" + to_string(b));
    }
    return names;
}

namespace {

// Runs fn(i) for each modality index, in worker threads when the thread
// budget allows. Worker computations are fully independent, so the result is
// identical either way.
void for_each_modality(int count, int thread_budget, const std::function<void(int)>& fn) {
    if (thread_budget == 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    const int inner = std::max(1, thread_budget / count);
    std::vector<std::thread> workers;
    std::exception_ptr error;
    std::mutex error_mu;
    workers.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        workers.emplace_back([&, i] {
            detail::set_compute_threads_local(inner);
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (std::thread& w : workers) w.join();
    if (error) std::rethrow_exception(error);
}

struct ModStepContext {
    std::unique_ptr<Tape> tape;
    BoundEncoder bound;
    Var z_q;
    Tensor z_k;
    TeacherBatch teacher;
    Var loss;
    bool has_loss = false;
    double scl_value = 0.0;
    bool scl_active = false;
    std::vector<std::pair<size_t, double>> incoming_kl;  // (pair index, value)
};

}  // namespace

StepMetrics train_step(TrainState& state, const Dataset& data, std::span<const int> sample_indices) {
    const TrainConfig& cfg = state.cfg;
    const int batch = static_cast<int>(sample_indices.size());
    if (batch < 1) throw UsageError("train_step: empty batch");
    const int t_len = cfg.temporal_length;
    const AugmentConfig aug = cfg.augment_config();
    const std::vector<Modality> mods = cfg.modality_list();
    const auto pairs = cfg.modality_pairs();
    const int n_mods = static_cast<int>(mods.size());
    const int threads = cfg.threads > 0 ? cfg.threads : compute_threads();
    set_gru_fp32_storage(cfg.train_fp32_storage);

    // Augmented query/key views in joint space, shared across modalities so
    // that every modality sees the same geometry of the same clip. Pure
    // per-sample work, prepared by a small worker pool.
    std::vector<SkeletonSequence> q_views(static_cast<size_t>(batch));
    std::vector<SkeletonSequence> k_views(static_cast<size_t>(batch));
    {
        for (int i = 0; i < batch; ++i) {
            const int src = sample_indices[static_cast<size_t>(i)];
            if (src < 0 || src >= static_cast<int>(data.size())) {
                throw UsageError("train_step: sample index out of range");
            }
        }
        const auto prep = [&](int i) {
            const int src = sample_indices[static_cast<size_t>(i)];
            const SkeletonSequence& raw = data.items[static_cast<size_t>(src)];
            const uint64_t base = derive_seed(cfg.seed, static_cast<uint64_t>(state.epoch),
                                              static_cast<uint64_t>(src));
            q_views[static_cast<size_t>(i)] = augment(raw, derive_seed(base, 0), aug);
            k_views[static_cast<size_t>(i)] = augment(raw, derive_seed(base, 1), aug);
        };
        if (threads > 1 && batch > 1) {
            const int workers = std::min(threads, batch);
            std::vector<std::thread> pool;
            pool.reserve(static_cast<size_t>(workers));
            std::exception_ptr error;
            std::mutex error_mu;
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        for (int i = w; i < batch; i += workers) prep(i);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(error_mu);
                        if (!error) error = std::current_exception();
                    }
                });
            }
            for (std::thread& t : pool) t.join();
            if (error) std::rethrow_exception(error);
        } else {
            for (int i = 0; i < batch; ++i) prep(i);
        }
    }

    // Phase A: per-modality derivation and forward passes. Derivation happens
    // after augmentation so every modality sees consistent geometry.
    std::vector<ModStepContext> ctx(static_cast<size_t>(n_mods));
    for_each_modality(n_mods, threads, [&](int mi) {
        ModStepContext& c = ctx[static_cast<size_t>(mi)];
        ModalityState& ms = state.mods[static_cast<size_t>(mi)];
        std::vector<SkeletonSequence> qs, ks;
        qs.reserve(static_cast<size_t>(batch));
        ks.reserve(static_cast<size_t>(batch));
        for (int i = 0; i < batch; ++i) {
            if (cfg.shared_aug_seed) {
                qs.push_back(derive_modality(q_views[static_cast<size_t>(i)],
                                             mods[static_cast<size_t>(mi)], state.topo));
                ks.push_back(derive_modality(k_views[static_cast<size_t>(i)],
                                             mods[static_cast<size_t>(mi)], state.topo));
            } else {
                const int src = sample_indices[static_cast<size_t>(i)];
                const SkeletonSequence& raw = data.items[static_cast<size_t>(src)];
                const uint64_t base = derive_seed(cfg.seed, static_cast<uint64_t>(state.epoch),
                                                  static_cast<uint64_t>(src),
                                                  static_cast<uint64_t>(mi + 2));
                qs.push_back(derive_modality(augment(raw, derive_seed(base, 0), aug),
                                             mods[static_cast<size_t>(mi)], state.topo));
                ks.push_back(derive_modality(augment(raw, derive_seed(base, 1), aug),
                                             mods[static_cast<size_t>(mi)], state.topo));
            }
        }
        std::vector<const SkeletonSequence*> qp, kp;
        for (const auto& s : qs) qp.push_back(&s);
        for (const auto& s : ks) kp.push_back(&s);
        const Tensor x_q = flatten_batch(qp);
        const Tensor x_k = flatten_batch(kp);

        c.tape = std::make_unique<Tape>();
        c.bound = bind_trainable(*c.tape, ms.pair.query);
        c.z_q = encode(c.bound, ms.pair.query, constant(x_q), batch, t_len,
                       {/*train=*/true, /*update_running_stats=*/true});
        c.z_k = encode_values(ms.pair.key, x_k, batch, t_len,
                              {/*train=*/true, /*update_running_stats=*/true});
    });

    // Distillation is gated on every participating bank being full.
    bool all_full = n_mods >= 2 && !pairs.empty() && cfg.cmd_weight != 0.0;
    for (const ModalityState& ms : state.mods) all_full = all_full && ms.bank.full();

    // Phase B: teacher distributions (cheap, constant).
    if (all_full) {
        for (int mi = 0; mi < n_mods; ++mi) {
            ctx[static_cast<size_t>(mi)].teacher = teacher_batch(
                ctx[static_cast<size_t>(mi)].z_k, state.mods[static_cast<size_t>(mi)].bank, cfg.K,
                cfg.tau_t);
        }
    }

    // Phase C: losses and backward per modality. The cross-modal terms only
    // couple through constant teachers, so each modality owns an independent
    // graph: loss_mi = SCL_mi + sum over pairs (a,b) with b == mi of
    // KL(teacher_a || student_mi).
    auto mod_index = [&](Modality m) {
        for (int i = 0; i < n_mods; ++i) {
            if (mods[static_cast<size_t>(i)] == m) return i;
        }
        throw UsageError("train_step: unknown modality in pair list");
    };
    for_each_modality(n_mods, threads, [&](int mi) {
        ModStepContext& c = ctx[static_cast<size_t>(mi)];
        ModalityState& ms = state.mods[static_cast<size_t>(mi)];
        Var loss;
        bool has = false;
        if (ms.bank.filled() >= 1) {
            Var scl = info_nce(c.z_q, c.z_k, ms.bank, cfg.tau_c);
            c.scl_value = scl.value().item();
            c.scl_active = true;
            loss = scl;
            has = true;
        }
        if (all_full) {
            for (size_t pi = 0; pi < pairs.size(); ++pi) {
                const auto& [a, b] = pairs[pi];
                int teacher_mi = -1;
                if (b == mods[static_cast<size_t>(mi)]) teacher_mi = mod_index(a);
                if (a == mods[static_cast<size_t>(mi)]) teacher_mi = mod_index(b);
                if (teacher_mi < 0) continue;
                Var dir = cmd_direction_loss(ctx[static_cast<size_t>(teacher_mi)].teacher, c.z_q,
                                             ms.bank, cfg.tau_s);
                c.incoming_kl.emplace_back(pi, dir.value().item());
                Var weighted = cfg.cmd_weight == 1.0 ? dir : scale(dir, cfg.cmd_weight);
                loss = has ? add(loss, weighted) : weighted;
                has = true;
            }
        }
        if (has) {
            c.loss = loss;
            c.has_loss = true;
            c.tape->backward(c.loss);
        }
    });

    // Phase D: serial updates.
    const double lr = lr_at_epoch(cfg, state.epoch);
    for (int mi = 0; mi < n_mods; ++mi) {
        ModStepContext& c = ctx[static_cast<size_t>(mi)];
        ModalityState& ms = state.mods[static_cast<size_t>(mi)];
        if (c.has_loss) {
            std::vector<Tensor> grads = collect_grads(*c.tape, c.bound);
            size_t gi = 0;
            ms.pair.query.for_each_trainable([&](const std::string&, Tensor& t) {
                sgd_update(t, ms.velocity[gi], grads[gi], lr, cfg.sgd_momentum, cfg.weight_decay);
                ++gi;
            });
            momentum_update(ms.pair);
        }
        if (cfg.debug_provenance) {
            std::vector<int64_t> sources;
            sources.reserve(static_cast<size_t>(batch));
            for (int i = 0; i < batch; ++i) sources.push_back(sample_indices[static_cast<size_t>(i)]);
            ms.bank.enqueue(c.z_k, sources);
        } else {
            ms.bank.enqueue(c.z_k);
        }
    }
    if (cfg.debug_provenance) {
        for (int mi = 1; mi < n_mods; ++mi) {
            if (state.mods[static_cast<size_t>(mi)].bank.provenance() !=
                state.mods[0].bank.provenance()) {
                throw UsageError("train_step: cross-modal memory banks lost index alignment");
            }
        }
    }

    // Metrics.
    StepMetrics m;
    m.epoch = state.epoch;
    m.step = ++state.global_step;
    m.lr = lr;
    std::vector<double> pair_sums(pairs.size(), 0.0);
    for (int mi = 0; mi < n_mods; ++mi) {
        const ModStepContext& c = ctx[static_cast<size_t>(mi)];
        m.terms.emplace_back("loss_scl_" + to_string(mods[static_cast<size_t>(mi)]),
                             c.scl_active ? c.scl_value : 0.0);
        m.any_loss = m.any_loss || c.has_loss;
        for (const auto& [pi, v] : c.incoming_kl) pair_sums[pi] += v;
    }
    for (size_t pi = 0; pi < pairs.size(); ++pi) {
        m.terms.emplace_back(
            "loss_cmd_" + to_string(pairs[pi].first) + "_" + to_string(pairs[pi].second),
            pair_sums[pi]);
    }
    double total = 0.0;
    for (int mi = 0; mi < n_mods; ++mi) {
        total += ctx[static_cast<size_t>(mi)].scl_active ? ctx[static_cast<size_t>(mi)].scl_value : 0.0;
    }
    for (double v : pair_sums) total += cfg.cmd_weight * v;
    m.loss_total = total;
    return m;
}

FitResult fit(TrainState& state, const Dataset& data, const std::filesystem::path& out_dir,
              const StepSink& sink) {
    const TrainConfig& cfg = state.cfg;
    cfg.validate();
    if (data.empty()) throw UsageError("fit: dataset is empty");
    std::filesystem::create_directories(out_dir);

    if (cfg.threads > 0) set_compute_threads(cfg.threads);

    const int n = static_cast<int>(data.size());
    const int batch = std::min(cfg.batch_size, n);
    const int steps_per_epoch = n / batch;  // final partial batch is dropped

    const std::vector<std::string> names = metric_names(cfg);
    FitResult res;
    res.metrics_path = out_dir / "metrics.csv";
    std::ofstream csv(res.metrics_path);
    if (!csv) throw IoError("cannot write " + res.metrics_path.string());
    csv << "epoch,step,lr,loss_total";
    for (const std::string& name : names) csv << "," << name;
    csv << "\n";

    for (; state.epoch < cfg.epochs; /* advanced below */) {
        // Deterministic per-epoch shuffle derived from (seed, epoch).
        std::vector<int> perm(static_cast<size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(derive_seed(cfg.seed, 0x657068u, static_cast<uint64_t>(state.epoch)));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
            std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }

        double sum_total = 0.0;
        std::vector<double> sums(names.size(), 0.0);
        double lr = lr_at_epoch(cfg, state.epoch);
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::span<const int> idx(perm.data() + static_cast<size_t>(s) * batch,
                                     static_cast<size_t>(batch));
            StepMetrics sm = train_step(state, data, idx);
            if (sink) sink(sm);
            sum_total += sm.loss_total;
            for (size_t i = 0; i < sm.terms.size() && i < sums.size(); ++i) {
                sums[i] += sm.terms[i].second;
            }
            lr = sm.lr;
        }
        csv << state.epoch << "," << state.global_step << "," << lr << ","
            << (steps_per_epoch ? sum_total / steps_per_epoch : 0.0);
        for (double v : sums) csv << "," << (steps_per_epoch ? v / steps_per_epoch : 0.0);
        csv << "\n";
        csv.flush();

        ++state.epoch;
        if (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 &&
            state.epoch < cfg.epochs) {
            save_checkpoint(out_dir / ("checkpoint-e" + std::to_string(state.epoch) + ".ckpt"),
                            to_checkpoint(state));
        }
        ++res.epochs_run;
    }

    res.checkpoint_path = out_dir / "checkpoint.ckpt";
    save_checkpoint(res.checkpoint_path, to_checkpoint(state));
    return res;
}

}  // namespace cmdskel

#include "fsc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "fsc/io.hpp"

namespace fsc {

namespace {

// per-stage RNG stream salts; a fresh Rng(mix64(seed ^ salt), step) per step
// makes every step a pure function of (seed, config, step), so a resumed run
// replays the remaining steps bit-exactly
constexpr uint64_t kPretrainStream = 0x13572468;
constexpr uint64_t kMetaStream = 0x2468ace0;
constexpr uint64_t kFinetuneStream = 0x36925814;
constexpr uint64_t kValStream = 0x48151623;

constexpr int kValDraws = 8;  // fixed noise draws per validation evaluation

double wall_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_finite(double loss, const std::string& stage, int step) {
    if (!std::isfinite(loss))
        throw NumericError(stage + ": non-finite loss at step " + std::to_string(step));
}

// partitions whose digests changed between two digest_all snapshots
std::vector<std::string> changed_partitions(const std::map<std::string, std::string>& before,
                                            const std::map<std::string, std::string>& after) {
    std::vector<std::string> out;
    for (const auto& [name, dig] : after) {
        auto it = before.find(name);
        if (it == before.end() || it->second != dig) out.push_back(name);
    }
    return out;
}

// hard audit: everything the stage updated must be in its allowed set
void audit_updates(const std::string& stage, const std::vector<std::string>& updated,
                   const std::set<std::string>& allowed) {
    for (const auto& name : updated)
        FSC_CHECK(allowed.count(name) != 0, stage + ": frozen partition changed: " + name);
}

CheckpointMeta resume_meta(const std::string& dir, const RunConfig& cfg,
                           const std::string& stage) {
    CheckpointMeta meta = read_checkpoint_meta(dir);
    if (meta.stage != stage)
        throw ConfigError("resume: checkpoint stage is '" + meta.stage + "', expected '" + stage +
                          "'");
    auto it = meta.provenance.find("model_hash");
    const std::string want = it != meta.provenance.end() ? it->second : meta.config_hash;
    const std::string have = it != meta.provenance.end() ? model_hash(cfg) : config_hash(cfg);
    if (want != have)
        throw ConfigError("resume: checkpoint was built for a different model or schedule (" +
                          want + " vs " + have + ")");
    return meta;
}

int provenance_steps(const CheckpointMeta& meta) {
    auto it = meta.provenance.find("steps");
    if (it == meta.provenance.end()) throw DataError("checkpoint: provenance lacks 'steps'");
    return std::stoi(it->second);
}

std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (const auto& n : names) {
        if (!out.empty()) out += ",";
        out += n;
    }
    return out;
}

}  // namespace

std::string model_hash(const RunConfig& cfg) {
    return sha256_hex(section_hash(cfg, "backbone") + section_hash(cfg, "schedule"));
}

void Model::init(const RunConfig& c) {
    cfg = c;
    cfg.validate();
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end);
    Rng rng(cfg.inference.seed, 0xb0de);
    net.init(cfg.backbone, rng);
    with_adapter = false;
    rebuild_store();
}

void Model::attach_adapter(const std::vector<std::string>& tasks) {
    pair = clone_encoders(net, cfg.train.bias_cap);
    for (const auto& t : tasks) pair.register_task(t);
    Rng rng(cfg.inference.seed, 0xada9);
    adapter.init(cfg.backbone, cfg.train.matching_heads, rng);
    with_adapter = true;
    rebuild_store();
}

void Model::add_task(const std::string& task) {
    FSC_CHECK(with_adapter, "add_task: adapter not attached");
    if (!pair.has_task(task)) pair.register_task(task);
    rebuild_store();
}

void Model::rebuild_store() {
    store = ParamStore<float>();
    net.visit([&](Param<float>& p) { store.add("backbone", &p); });
    if (with_adapter) {
        pair.collect_into(store);
        adapter.collect_into(store);
        // once a control path exists, the generative backbone is frozen;
        // the cloned image encoder is already non-trainable
        store.set_trainable("backbone", false);
    } else {
        store.set_trainable("backbone", true);
    }
}

std::vector<NoiseDraw> draw_noise_batch(const std::vector<const Tensor<float>*>& z0,
                                        const std::vector<int>& descriptors,
                                        const NoiseSchedule& sched, Rng& rng, double drop_prob) {
    if (z0.empty()) throw DataError("denoise: empty batch");
    FSC_CHECK(z0.size() == descriptors.size(), "denoise: descriptor count mismatch");
    std::vector<NoiseDraw> draws;
    draws.reserve(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) {
        NoiseDraw d;
        d.t = 1 + int(rng.below(uint32_t(sched.T)));
        d.eps = Tensor<float>::zeros(z0[i]->shape);
        d.eps.fill_normal(rng);
        d.dropped = rng.bernoulli(drop_prob);
        d.descriptor = d.dropped ? 0 : descriptors[i];
        d.z_t = q_sample(*z0[i], d.eps, d.t, sched);
        draws.push_back(std::move(d));
    }
    return draws;
}

Var denoise_loss_graph(Tape<float>& t, const EpsModel& fn, const std::vector<NoiseDraw>& draws) {
    if (draws.empty()) throw DataError("denoise: empty batch");
    std::vector<Var> losses;
    losses.reserve(draws.size());
    for (const NoiseDraw& d : draws) {
        Var pred = fn(t, d);
        losses.push_back(t.mse(pred, t.input(d.eps)));
    }
    return t.average(losses);
}

double denoise_loss(const EpsModel& fn, const std::vector<NoiseDraw>& draws) {
    Tape<float> tape;
    Var loss = denoise_loss_graph(tape, fn, draws);
    return double(tape.val(loss).v[0]);
}

std::vector<LabeledPair> load_support(const std::string& dir, const std::string& task, int limit) {
    DatasetManifest man = load_dataset(dir);
    find_task(task);  // ConfigError when unknown
    int n = int(man.samples.size());
    if (limit > 0) n = std::min(n, limit);
    std::vector<LabeledPair> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        const DatasetSample& s = man.samples[size_t(i)];
        auto it = s.conditions.find(task);
        if (it == s.conditions.end())
            throw DataError("dataset: sample " + s.image + " lacks a condition for task '" + task +
                            "'");
        LabeledPair lp;
        lp.seed = s.seed;
        lp.descriptor = s.descriptor;
        lp.image = read_ppm(dir + "/" + s.image);
        lp.condition = read_ppm(dir + "/" + it->second);
        out.push_back(std::move(lp));
    }
    return out;
}

TrainReport pretrain_backbone(Model& m, const DatasetManifest& data, const std::string& out_ckpt,
                              const std::string& resume_ckpt) {
    auto t0 = std::chrono::steady_clock::now();
    if (data.samples.empty()) throw DataError("pretrain: dataset is empty");
    if (data.image_size != m.cfg.backbone.image_size)
        throw DataError("pretrain: dataset image size " + std::to_string(data.image_size) +
                        " does not match model size " +
                        std::to_string(m.cfg.backbone.image_size));

    AdamW opt(m.cfg.train.lr, m.cfg.train.weight_decay);
    int start = 0;
    if (!resume_ckpt.empty()) {
        CheckpointMeta meta = resume_meta(resume_ckpt, m.cfg, "pretrain");
        load_checkpoint(resume_ckpt, m.store, &opt);
        start = provenance_steps(meta);
    }

    auto before = m.store.digest_all();
    TrainReport rep;
    rep.stage = "pretrain";

    const int batch = m.cfg.train.batch_size;
    const int size = m.cfg.backbone.image_size;
    for (int step = start; step < m.cfg.train.pretrain_steps; ++step) {
        Rng rng(mix64(m.cfg.inference.seed ^ kPretrainStream), uint64_t(step));
        // regenerate scenes from their manifest seeds: bit-exact training
        // data without the 8-bit quantization of the stored images
        std::vector<Tensor<float>> z0s;
        std::vector<int> descs;
        z0s.reserve(size_t(batch));
        for (int b = 0; b < batch; ++b) {
            const DatasetSample& s = data.samples[rng.below(uint32_t(data.samples.size()))];
            auto [img, spec] = generate_scene(s.seed, size);
            (void)spec;
            z0s.push_back(to_signed(img));
            descs.push_back(s.descriptor);
        }
        std::vector<const Tensor<float>*> ptrs;
        ptrs.reserve(z0s.size());
        for (const auto& z : z0s) ptrs.push_back(&z);
        auto draws = draw_noise_batch(ptrs, descs, m.sched, rng, m.cfg.train.cfg_drop_prob);

        Tape<float> tape;
        EpsModel fn = [&](Tape<float>& t, const NoiseDraw& d) {
            return m.net.forward(t, t.input(d.z_t), d.t, d.descriptor);
        };
        Var loss = denoise_loss_graph(tape, fn, draws);
        double lv = double(tape.val(loss).v[0]);
        check_finite(lv, "pretrain", step);
        tape.backward(loss);
        opt.step(m.store.all());
        for (Param<float>* p : m.store.all()) p->zero_grad();
        rep.loss_trace.push_back(lv);
        ++rep.steps;
    }

    rep.updated_partitions = changed_partitions(before, m.store.digest_all());
    audit_updates("pretrain", rep.updated_partitions, {"backbone"});

    if (!out_ckpt.empty()) {
        CheckpointMeta meta;
        meta.config_hash = config_hash(m.cfg);
        meta.provenance["model_hash"] = model_hash(m.cfg);
        meta.stage = "pretrain";
        meta.provenance["steps"] = std::to_string(m.cfg.train.pretrain_steps);
        meta.provenance["dataset_seed"] = std::to_string(data.seed);
        meta.provenance["dataset_count"] = std::to_string(data.samples.size());
        save_checkpoint(out_ckpt, m.store, meta, &opt);
        rep.checkpoint_dir = out_ckpt;
    }
    rep.wall_seconds = wall_since(t0);
    return rep;
}

TrainReport meta_train(Model& m, const std::string& out_ckpt, bool no_matching,
                       const std::string& resume_ckpt) {
    auto t0 = std::chrono::steady_clock::now();
    FSC_CHECK(m.with_adapter, "meta: adapter not attached");
    const std::vector<std::string> tasks = split_tasks("meta_train");
    for (const auto& name : tasks)
        if (!m.pair.has_task(name)) throw ConfigError("meta: task not registered: " + name);

    const std::string stage = no_matching ? "meta_no_matching" : "meta";
    AdamW opt(m.cfg.train.lr, m.cfg.train.weight_decay);
    int start = 0;
    if (!resume_ckpt.empty()) {
        CheckpointMeta meta = resume_meta(resume_ckpt, m.cfg, stage);
        load_checkpoint(resume_ckpt, m.store, &opt);
        start = provenance_steps(meta);
    }

    auto before = m.store.digest_all();
    TrainReport rep;
    rep.stage = stage;

    const int size = m.cfg.backbone.image_size;
    for (int step = start; step < m.cfg.train.meta_steps; ++step) {
        Rng rng(mix64(m.cfg.inference.seed ^ kMetaStream), uint64_t(step));
        Tape<float> tape;
        std::vector<Var> episode_losses;
        for (int e = 0; e < m.cfg.train.episodes_per_step; ++e) {
            Episode ep = sample_episode("meta_train", rng, m.cfg.train.support_n,
                                        m.cfg.train.query_n, size);
            std::vector<std::pair<Var, Var>> sup;
            sup.reserve(ep.support.pairs.size());
            for (const auto& [img, cond] : ep.support.pairs)
                sup.emplace_back(tape.input(to_signed(img)), tape.input(to_signed(cond)));
            std::vector<Var> qlosses;
            for (const EpisodeQuery& q : ep.query) {
                Tensor<float> z0 = to_signed(q.image);
                std::vector<const Tensor<float>*> one{&z0};
                auto draws = draw_noise_batch(one, {q.descriptor}, m.sched, rng,
                                              m.cfg.train.cfg_drop_prob);
                const NoiseDraw& d = draws[0];
                Var pred;
                if (d.dropped && m.cfg.inference.cfg_null_control) {
                    // train the branch guidance actually samples: null
                    // descriptor together with no control injection
                    pred = m.net.forward(tape, tape.input(d.z_t), d.t, d.descriptor);
                } else {
                    std::vector<Var> control;
                    if (no_matching) {
                        // ablation: bypass support matching, inject the
                        // query condition's own features
                        control = m.pair.encode_condition(tape, tape.input(to_signed(q.condition)),
                                                          ep.task_id);
                    } else {
                        control = m.adapter.build_control(
                            tape, m.pair, tape.input(to_signed(q.condition)), sup, ep.task_id, d.t);
                    }
                    LevelTap<float> tap = m.adapter.make_tap(tape, control);
                    pred = m.net.forward(tape, tape.input(d.z_t), d.t, d.descriptor, &tap);
                }
                qlosses.push_back(tape.mse(pred, tape.input(d.eps)));
            }
            episode_losses.push_back(tape.average(qlosses));
        }
        Var loss = tape.average(episode_losses);
        double lv = double(tape.val(loss).v[0]);
        check_finite(lv, stage, step);
        tape.backward(loss);
        opt.step(m.store.all());
        for (Param<float>* p : m.store.all()) p->zero_grad();
        rep.loss_trace.push_back(lv);
        ++rep.steps;
    }

    rep.updated_partitions = changed_partitions(before, m.store.digest_all());
    std::set<std::string> allowed = {"cond_shared", "projections"};
    if (!no_matching) allowed.insert("matching");
    for (const auto& name : tasks) allowed.insert("task_bias/" + name);
    audit_updates(stage, rep.updated_partitions, allowed);

    if (!out_ckpt.empty()) {
        CheckpointMeta meta;
        meta.config_hash = config_hash(m.cfg);
        meta.provenance["model_hash"] = model_hash(m.cfg);
        meta.stage = stage;
        meta.provenance["steps"] = std::to_string(m.cfg.train.meta_steps);
        meta.provenance["tasks"] = join_names(tasks);
        meta.provenance["heads"] = std::to_string(m.cfg.train.matching_heads);
        meta.provenance["ablation"] = no_matching ? "no_matching" : "none";
        save_checkpoint(out_ckpt, m.store, meta, &opt);
        rep.checkpoint_dir = out_ckpt;
    }
    rep.wall_seconds = wall_since(t0);
    return rep;
}

TrainReport finetune(Model& m, const std::string& task, const std::vector<LabeledPair>& support,
                     const std::string& out_ckpt) {
    auto t0 = std::chrono::steady_clock::now();
    FSC_CHECK(m.with_adapter, "finetune: adapter not attached");
    find_task(task);  // ConfigError when unknown
    const int n = int(support.size());
    if (n < 3) throw DataError("finetune: need at least 3 support pairs, got " + std::to_string(n));
    const int size = m.cfg.backbone.image_size;
    for (const LabeledPair& lp : support) {
        if (lp.image.shape != std::vector<int>{3, size, size} ||
            lp.condition.shape != lp.image.shape)
            throw DataError("finetune: support pair shape mismatch");
    }

    m.add_task(task);  // bias set seeded with the mean of the trained sets
    // only the new task's biases and the matching/projection stack move
    for (const auto& part : m.store.order) m.store.set_trainable(part, false);
    m.store.set_trainable("task_bias/" + task, true);
    m.store.set_trainable("matching", true);
    m.store.set_trainable("projections", true);

    AdamW opt(m.cfg.finetune.lr, m.cfg.train.weight_decay);
    auto before = m.store.digest_all();
    TrainReport rep;
    rep.stage = "finetune";

    // signed copies once; everything below indexes into these
    std::vector<Tensor<float>> simg, scond;
    simg.reserve(size_t(n));
    scond.reserve(size_t(n));
    for (const LabeledPair& lp : support) {
        simg.push_back(to_signed(lp.image));
        scond.push_back(to_signed(lp.condition));
    }

    const uint64_t seed = uint64_t(m.cfg.inference.seed);
    Rng split_rng(mix64(seed ^ kFinetuneStream ^ 0xf17), 0);
    FinetuneSplit cur = make_finetune_split(n, split_rng);
    const int val_idx = cur.val;
    const int sn = int(cur.pseudo_support.size());

    // validation: denoise loss on the held-out pair under the current
    // pseudo-support, over a frozen set of noise draws so the curve is
    // comparable across evaluations
    auto val_loss = [&](const std::vector<int>& s_idx) {
        Rng vr(mix64(seed ^ kValStream), 0);
        std::vector<const Tensor<float>*> ptrs(size_t(kValDraws), &simg[size_t(val_idx)]);
        std::vector<int> descs(size_t(kValDraws), support[size_t(val_idx)].descriptor);
        auto draws = draw_noise_batch(ptrs, descs, m.sched, vr, 0.0);
        Tape<float> tape;
        std::vector<std::pair<Var, Var>> sup;
        for (int i : s_idx)
            sup.emplace_back(tape.input(simg[size_t(i)]), tape.input(scond[size_t(i)]));
        Var y_q = tape.input(scond[size_t(val_idx)]);
        std::vector<Var> ls;
        for (const NoiseDraw& d : draws) {
            std::vector<Var> control = m.adapter.build_control(tape, m.pair, y_q, sup, task, d.t);
            LevelTap<float> tap = m.adapter.make_tap(tape, control);
            Var pred = m.net.forward(tape, tape.input(d.z_t), d.t, d.descriptor, &tap);
            ls.push_back(tape.mse(pred, tape.input(d.eps)));
        }
        return double(tape.val(tape.average(ls)).v[0]);
    };

    rep.val_first = val_loss(cur.pseudo_support);
    check_finite(rep.val_first, "finetune", 0);
    rep.val_best = rep.val_first;
    rep.val_last = rep.val_first;
    int stagnant = 0;

    for (int step = 0; step < m.cfg.finetune.max_steps; ++step) {
        Rng rng(mix64(seed ^ kFinetuneStream), uint64_t(step));
        if (m.cfg.finetune.repartition && step > 0) {
            // keep the validation pair fixed, reshuffle the rest
            std::vector<int> rest;
            for (int i = 0; i < n; ++i)
                if (i != val_idx) rest.push_back(i);
            rng.shuffle(rest);
            cur.pseudo_support.assign(rest.begin(), rest.begin() + sn);
            cur.pseudo_query.assign(rest.begin() + sn, rest.end());
        }
        const int bs = std::min(m.cfg.finetune.batch_size, int(cur.pseudo_query.size()));
        std::vector<int> picks = rng.pick_distinct(int(cur.pseudo_query.size()), bs);

        Tape<float> tape;
        std::vector<std::pair<Var, Var>> sup;
        for (int i : cur.pseudo_support)
            sup.emplace_back(tape.input(simg[size_t(i)]), tape.input(scond[size_t(i)]));
        std::vector<Var> qlosses;
        for (int pi : picks) {
            const int qi = cur.pseudo_query[size_t(pi)];
            std::vector<const Tensor<float>*> one{&simg[size_t(qi)]};
            auto draws = draw_noise_batch(one, {support[size_t(qi)].descriptor}, m.sched, rng,
                                          m.cfg.train.cfg_drop_prob);
            const NoiseDraw& d = draws[0];
            Var pred;
            if (d.dropped && m.cfg.inference.cfg_null_control) {
                pred = m.net.forward(tape, tape.input(d.z_t), d.t, d.descriptor);
            } else {
                std::vector<Var> control = m.adapter.build_control(
                    tape, m.pair, tape.input(scond[size_t(qi)]), sup, task, d.t);
                LevelTap<float> tap = m.adapter.make_tap(tape, control);
                pred = m.net.forward(tape, tape.input(d.z_t), d.t, d.descriptor, &tap);
            }
            qlosses.push_back(tape.mse(pred, tape.input(d.eps)));
        }
        Var loss = tape.average(qlosses);
        double lv = double(tape.val(loss).v[0]);
        check_finite(lv, "finetune", step);
        tape.backward(loss);
        opt.step(m.store.all());
        for (Param<float>* p : m.store.all()) p->zero_grad();
        rep.loss_trace.push_back(lv);
        ++rep.steps;

        if ((step + 1) % m.cfg.finetune.eval_every == 0) {
            double v = val_loss(cur.pseudo_support);
            check_finite(v, "finetune", step);
            rep.val_last = v;
            if (v < rep.val_best) {
                rep.val_best = v;
                stagnant = 0;
            } else {
                ++stagnant;
            }
            if (stagnant >= m.cfg.finetune.patience) {
                rep.early_stopped = true;
                break;
            }
        }
    }

    rep.updated_partitions = changed_partitions(before, m.store.digest_all());
    audit_updates("finetune", rep.updated_partitions,
                  {"task_bias/" + task, "matching", "projections"});

    if (!out_ckpt.empty()) {
        CheckpointMeta meta;
        meta.config_hash = config_hash(m.cfg);
        meta.provenance["model_hash"] = model_hash(m.cfg);
        meta.stage = "finetune";
        meta.provenance["steps"] = std::to_string(rep.steps);
        meta.provenance["task"] = task;
        meta.provenance["support_count"] = std::to_string(n);
        meta.provenance["early_stopped"] = rep.early_stopped ? "true" : "false";
        std::vector<std::string> seeds;
        for (const LabeledPair& lp : support) seeds.push_back(std::to_string(lp.seed));
        meta.provenance["support_seeds"] = join_names(seeds);
        save_checkpoint(out_ckpt, m.store, meta, &opt);
        rep.checkpoint_dir = out_ckpt;
    }
    rep.wall_seconds = wall_since(t0);
    return rep;
}

}  // namespace fsc

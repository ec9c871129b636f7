#include "fsc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

#include "fsc/io.hpp"
#include "fsc/metrics.hpp"

namespace fsc {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// [-1,1] sample -> [0,1] image
Tensor<float> to_unit(Tensor<float> z) {
    for (auto& v : z.v) v = std::min(1.0f, std::max(0.0f, 0.5f * (v + 1.0f)));
    return z;
}

std::string image_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "gen_%06d", i);
    return buf;
}

void write_json(const json& j, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << "\n";
}

json read_json(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw DataError("missing " + what + ": " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("corrupt " + what + ": " + path);
    return j;
}

}  // namespace

CheckpointMeta load_model(Model& m, const RunConfig& cfg, const std::string& ckpt_dir) {
    CheckpointMeta meta = read_checkpoint_meta(ckpt_dir);
    auto it = meta.provenance.find("model_hash");
    const std::string want = it != meta.provenance.end() ? it->second : meta.config_hash;
    const std::string have = it != meta.provenance.end() ? model_hash(cfg) : config_hash(cfg);
    if (want != have)
        throw ConfigError("checkpoint " + ckpt_dir +
                          " was built for a different model or schedule (" + want + " vs " + have +
                          ")");
    m.init(cfg);
    if (meta.stage != "pretrain") {
        std::vector<std::string> tasks;
        for (const PartitionSummary& p : checkpoint_partitions(ckpt_dir))
            if (p.name.rfind("task_bias/", 0) == 0) tasks.push_back(p.name.substr(10));
        if (tasks.empty())
            throw DataError("checkpoint " + ckpt_dir + " has stage '" + meta.stage +
                            "' but no task partitions");
        m.attach_adapter(tasks);
    }
    load_checkpoint(ckpt_dir, m.store);
    return meta;
}

Tensor<float> sample_backbone(Model& m, int descriptor, uint64_t seed) {
    const InferenceConfig& inf = m.cfg.inference;
    const int size = m.cfg.backbone.image_size;
    DenoiseFn<float> fn = [&](const Tensor<float>& z_t, int t_step, bool conditioned) {
        Tape<float> tape;
        Var out = m.net.forward(tape, tape.input(z_t), t_step, conditioned ? descriptor : 0);
        return tape.val(out);
    };
    SampleOptions opts;
    opts.clamp_x0 = inf.clamp_x0;
    Tensor<float> z = sample_loop<float>(fn, {3, size, size}, m.sched, inf.steps,
                                         float(inf.cfg_scale), seed, opts);
    return to_unit(std::move(z));
}

Tensor<float> generate_image(Model& m, const std::string& task,
                             const std::vector<LabeledPair>& support,
                             const Tensor<float>& condition, int descriptor, uint64_t seed) {
    const InferenceConfig& inf = m.cfg.inference;
    const int size = m.cfg.backbone.image_size;
    if (!m.with_adapter)
        throw ConfigError("generate: the loaded checkpoint has no control path");
    if (!m.pair.has_task(task))
        throw ConfigError("generate: no trained parameters for task '" + task + "'");
    if (condition.shape != std::vector<int>{3, size, size})
        throw DataError("generate: condition shape " + condition.shape_str() + ", expected [3," +
                        std::to_string(size) + "," + std::to_string(size) + "]");

    std::vector<std::pair<Tensor<float>, Tensor<float>>> sup;
    sup.reserve(support.size());
    for (const LabeledPair& lp : support)
        sup.emplace_back(to_signed(lp.image), to_signed(lp.condition));
    ControlAdapter<float>::Cache cache =
        m.adapter.precompute(m.pair, sup, to_signed(condition), task);

    DenoiseFn<float> fn = [&](const Tensor<float>& z_t, int t_step, bool conditioned) {
        Tape<float> tape;
        Var z = tape.input(z_t);
        Var out;
        if (conditioned || !m.cfg.inference.cfg_null_control) {
            std::vector<Var> control = m.adapter.build_control_cached(tape, cache, t_step);
            LevelTap<float> tap = m.adapter.make_tap(tape, control);
            out = m.net.forward(tape, z, t_step, conditioned ? descriptor : 0, &tap);
        } else {
            // guidance-free branch: null descriptor, no control injection
            out = m.net.forward(tape, z, t_step, 0);
        }
        return tape.val(out);
    };
    SampleOptions opts;
    opts.clamp_x0 = inf.clamp_x0;
    Tensor<float> z = sample_loop<float>(fn, {3, size, size}, m.sched, inf.steps,
                                         float(inf.cfg_scale), seed, opts);
    return to_unit(std::move(z));
}

GenerateReport cmd_generate(Model& m, const CheckpointMeta& ckpt, const std::string& task,
                            const std::string& support_dir, const std::string& queries_dir,
                            int n_images, const std::string& out_dir) {
    if (n_images < 1) throw ConfigError("generate: n_images must be positive");
    const InferenceConfig& inf = m.cfg.inference;
    auto support = load_support(support_dir, task, inf.support_pairs);
    if (int(support.size()) < inf.support_pairs)
        throw DataError("generate: support has " + std::to_string(support.size()) +
                        " pairs, need " + std::to_string(inf.support_pairs));

    const std::string qdir = queries_dir.empty() ? support_dir : queries_dir;
    const int offset = qdir == support_dir ? inf.support_pairs : 0;
    auto pool = load_support(qdir, task, offset + n_images);
    if (int(pool.size()) < offset + n_images)
        throw DataError("generate: query pool has " + std::to_string(pool.size()) +
                        " pairs, need " + std::to_string(offset + n_images));

    fs::create_directories(out_dir);
    json support_seeds = json::array();
    for (const LabeledPair& lp : support) support_seeds.push_back(lp.seed);

    GenerateReport rep;
    rep.task = task;
    rep.out_dir = out_dir;
    rep.config_hash = config_hash(m.cfg);
    for (int i = 0; i < n_images; ++i) {
        const LabeledPair& q = pool[size_t(offset + i)];
        uint64_t sample_seed = mix64(uint64_t(inf.seed) ^ q.seed);
        Tensor<float> img = generate_image(m, task, support, q.condition, q.descriptor,
                                           sample_seed);
        const std::string stem = image_name(i);
        write_ppm(out_dir + "/" + stem + ".ppm", img);
        json side;
        side["cfg_scale"] = inf.cfg_scale;
        side["checkpoint_hash"] = ckpt.config_hash;
        side["checkpoint_stage"] = ckpt.stage;
        side["config_hash"] = rep.config_hash;
        side["descriptor"] = q.descriptor;
        side["image"] = stem + ".ppm";
        side["query_seed"] = q.seed;
        side["sample_seed"] = sample_seed;
        side["steps"] = inf.steps;
        side["support_seeds"] = support_seeds;
        side["task"] = task;
        write_json(side, out_dir + "/" + stem + ".json");
        rep.images.push_back(stem + ".ppm");
    }
    return rep;
}

EvalReport evaluate_with(const GenerateFn& gen, const RunConfig& cfg, const std::string& task,
                         const std::vector<uint64_t>& support_seeds, const std::string& eval_dir,
                         int n_limit) {
    const TaskDef& td = find_task(task);
    DatasetManifest eman = load_dataset(eval_dir);
    if (eman.image_size != cfg.backbone.image_size)
        throw DataError("evaluate: eval pool image size " + std::to_string(eman.image_size) +
                        " does not match model size " +
                        std::to_string(cfg.backbone.image_size));

    std::set<uint64_t> sup(support_seeds.begin(), support_seeds.end());
    for (const DatasetSample& s : eman.samples)
        if (sup.count(s.seed))
            throw DataError("evaluate: support and eval pools overlap at scene seed " +
                            std::to_string(s.seed));

    int n = int(eman.samples.size());
    if (n_limit > 0) n = std::min(n, n_limit);
    if (n == 0) throw DataError("evaluate: eval pool is empty");

    EvalReport rep;
    rep.task = task;
    rep.metric = td.metric;
    rep.n_samples = n;
    rep.scale = task == "depth" ? 100.0 : 1.0;
    rep.config_hash = config_hash(cfg);
    const int size = cfg.backbone.image_size;
    for (int i = 0; i < n; ++i) {
        const DatasetSample& s = eman.samples[size_t(i)];
        auto it = s.conditions.find(task);
        if (it == s.conditions.end())
            throw DataError("evaluate: eval pool lacks conditions for task '" + task + "'");
        Tensor<float> cond = read_ppm(eval_dir + "/" + it->second);
        uint64_t sample_seed = mix64(uint64_t(cfg.inference.seed) ^ s.seed);
        Tensor<float> img = gen(cond, s.descriptor, sample_seed);
        if (img.shape != std::vector<int>{3, size, size})
            throw DataError("evaluate: generated image has shape " + img.shape_str());
        Tensor<float> est = estimate_condition(img, task);
        rep.values.push_back(task_score(task, est, cond) * rep.scale);
        rep.seeds.push_back(s.seed);
    }

    double mean = 0;
    for (double v : rep.values) mean += v;
    mean /= n;
    double var = 0;
    for (double v : rep.values) var += (v - mean) * (v - mean);
    rep.mean = mean;
    rep.stddev = std::sqrt(var / n);
    return rep;
}

EvalReport evaluate_model(Model& m, const CheckpointMeta& ckpt, const std::string& task,
                          const std::string& support_dir, const std::string& eval_dir,
                          int n_limit) {
    const InferenceConfig& inf = m.cfg.inference;
    auto support = load_support(support_dir, task, inf.support_pairs);
    if (int(support.size()) < inf.support_pairs)
        throw DataError("evaluate: support has " + std::to_string(support.size()) +
                        " pairs, need " + std::to_string(inf.support_pairs));
    // the whole support pool is off limits for evaluation, not just the
    // pairs conditioning the sampler
    std::vector<uint64_t> pool_seeds;
    for (const DatasetSample& s : load_dataset(support_dir).samples)
        pool_seeds.push_back(s.seed);
    GenerateFn gen = [&](const Tensor<float>& cond, int descriptor, uint64_t seed) {
        return generate_image(m, task, support, cond, descriptor, seed);
    };
    EvalReport rep = evaluate_with(gen, m.cfg, task, pool_seeds, eval_dir, n_limit);
    rep.checkpoint_stage = ckpt.stage;
    rep.checkpoint_hash = ckpt.config_hash;
    return rep;
}

void write_eval_report(const EvalReport& rep, const std::string& path) {
    json j;
    j["checkpoint_hash"] = rep.checkpoint_hash;
    j["checkpoint_stage"] = rep.checkpoint_stage;
    j["config_hash"] = rep.config_hash;
    j["mean"] = rep.mean;
    j["metric"] = rep.metric;
    j["n_samples"] = rep.n_samples;
    j["scale"] = rep.scale;
    j["seeds"] = rep.seeds;
    j["stddev"] = rep.stddev;
    j["task"] = rep.task;
    j["values"] = rep.values;
    write_json(j, path);
}

EvalReport read_eval_report(const std::string& path) {
    json j = read_json(path, "evaluation report");
    EvalReport rep;
    try {
        rep.task = j.at("task").get<std::string>();
        rep.metric = j.at("metric").get<std::string>();
        rep.n_samples = j.at("n_samples").get<int>();
        rep.scale = j.at("scale").get<double>();
        rep.values = j.at("values").get<std::vector<double>>();
        rep.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        rep.mean = j.at("mean").get<double>();
        rep.stddev = j.at("stddev").get<double>();
        rep.config_hash = j.at("config_hash").get<std::string>();
        rep.checkpoint_stage = j.at("checkpoint_stage").get<std::string>();
        rep.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw DataError(std::string("evaluation report field error: ") + e.what());
    }
    return rep;
}

ParamReport param_report(const std::string& ckpt_dir, double cap) {
    CheckpointMeta meta = read_checkpoint_meta(ckpt_dir);
    ParamReport rep;
    rep.stage = meta.stage;
    rep.config_hash = meta.config_hash;

    std::set<std::string> trainable;
    if (meta.stage == "pretrain") {
        trainable = {"backbone"};
    } else if (meta.stage == "meta" || meta.stage == "meta_no_matching") {
        trainable = {"cond_shared", "matching", "projections"};
    } else if (meta.stage == "finetune") {
        auto it = meta.provenance.find("task");
        if (it == meta.provenance.end())
            throw DataError("checkpoint: finetune stage lacks a task in provenance");
        trainable = {"task_bias/" + it->second, "matching", "projections"};
    } else {
        throw DataError("checkpoint: unknown stage '" + meta.stage + "'");
    }

    for (const PartitionSummary& p : checkpoint_partitions(ckpt_dir)) {
        PartitionInfo info;
        info.name = p.name;
        info.tensors = p.tensors;
        info.params = p.params;
        bool is_task = p.name.rfind("task_bias/", 0) == 0;
        bool meta_stage = meta.stage == "meta" || meta.stage == "meta_no_matching";
        info.frozen = !(trainable.count(p.name) || (is_task && meta_stage));
        rep.partitions.push_back(info);
        rep.total += p.params;
    }
    for (const PartitionInfo& p : rep.partitions)
        if (p.name.rfind("task_bias/", 0) == 0)
            rep.max_task_ratio = std::max(rep.max_task_ratio, double(p.params) / double(rep.total));

    if (rep.max_task_ratio >= cap) {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "task bias share %.4f of total parameters is not below the cap %.4f",
                      rep.max_task_ratio, cap);
        throw DataError(buf);
    }
    return rep;
}

std::string format_param_report(const ParamReport& rep) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "stage: %s\n%-24s %8s %12s  %s\n", rep.stage.c_str(),
                  "partition", "tensors", "params", "frozen");
    out += buf;
    for (const PartitionInfo& p : rep.partitions) {
        std::snprintf(buf, sizeof(buf), "%-24s %8d %12lld  %s\n", p.name.c_str(), p.tensors,
                      (long long)p.params, p.frozen ? "yes" : "no");
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-24s %8s %12lld\ntask bias share: %.4f\n", "total", "",
                  (long long)rep.total, rep.max_task_ratio);
    out += buf;
    return out;
}

}  // namespace fsc

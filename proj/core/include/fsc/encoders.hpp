#pragma once

// Image / condition encoder pair for few-shot control.
//
// f (image encoder) is a frozen deep copy of the backbone's encoder trunk.
// g (condition encoder) is a second copy whose weights and norm scales stay
// shared across tasks while every additive bias — conv biases, norm shifts,
// attention projection biases — becomes a per-task site resolved through a
// TaskBiasSet. g's own bias params are inert templates; every g forward runs
// under an explicit task bias context.
//
// Both encoders run at denoising time zero with the null scene descriptor:
// that modulation vector is computed once from the backbone at clone time and
// stored as a constant, so the clones carry no time-MLP or descriptor-table
// parameters of their own.

#include <map>
#include <string>
#include <vector>

#include "fsc/backbone.hpp"
#include "fsc/params.hpp"

namespace fsc {

template <typename S>
struct TaskBiasSet {
    std::string task_id;
    std::vector<Param<S>> biases;  // site-indexed, shapes mirror g's bias sites
};

// Per-level token matrices [M_l, d_l]; row-major flattening of each feature
// map's spatial grid, levels 0..L-1 then mid.
template <typename S>
struct PatchGrid {
    std::vector<Tensor<S>> levels;
};

template <typename S>
struct EncoderPair {
    EncoderStack<S> image_enc;  // f, frozen
    EncoderStack<S> cond_enc;   // g trunk
    Tensor<S> emb0;             // time-0 + null-descriptor modulation, fixed at clone
    std::vector<Param<S>*> image_sites, cond_sites;
    std::map<std::string, TaskBiasSet<S>> task_bias;
    double bias_cap = 0.05;
    int in_channels = 0, image_size = 0;

    EncoderPair() = default;
    EncoderPair(const EncoderPair&) = delete;
    EncoderPair& operator=(const EncoderPair&) = delete;
    // site pointers aim at params owned by the encoder members, so a move
    // must re-derive them against the new addresses
    EncoderPair(EncoderPair&& o) noexcept { *this = std::move(o); }
    EncoderPair& operator=(EncoderPair&& o) noexcept {
        image_enc = std::move(o.image_enc);
        cond_enc = std::move(o.cond_enc);
        emb0 = std::move(o.emb0);
        task_bias = std::move(o.task_bias);
        bias_cap = o.bias_cap;
        in_channels = o.in_channels;
        image_size = o.image_size;
        rebind_sites();
        o.image_sites.clear();
        o.cond_sites.clear();
        return *this;
    }

    void rebind_sites() {
        auto rebind = [](EncoderStack<S>& enc, std::vector<Param<S>*>& sites) {
            sites.clear();
            enc.visit([&](Param<S>& p) {
                if (p.bias_site < 0) return;
                if (p.bias_site >= int(sites.size())) sites.resize(size_t(p.bias_site) + 1);
                sites[size_t(p.bias_site)] = &p;
            });
        };
        rebind(image_enc, image_sites);
        rebind(cond_enc, cond_sites);
    }

    int levels() const { return cond_enc.levels() + 1; }

    // floats in one task's bias set
    int64_t site_count() const {
        int64_t n = 0;
        for (const Param<S>* p : cond_sites) n += p->value.numel();
        return n;
    }

    // g floats shared across tasks (everything that is not a bias site)
    int64_t shared_count() {
        return cond_enc.param_count() - site_count();
    }

    double bias_fraction() { return double(site_count()) / double(shared_count()); }

    bool has_task(const std::string& task_id) const { return task_bias.count(task_id) != 0; }

    BiasCtx<S> bias_ctx(const std::string& task_id) {
        auto it = task_bias.find(task_id);
        if (it == task_bias.end()) throw ConfigError("task not registered: " + task_id);
        BiasCtx<S> ctx(it->second.biases.size());
        for (size_t i = 0; i < ctx.size(); ++i) ctx[i] = &it->second.biases[i];
        return ctx;
    }

    void check_input(const Tensor<S>& x, const char* what) const {
        if (int(x.shape.size()) != 3 || x.shape[0] != in_channels || x.shape[1] != image_size ||
            x.shape[2] != image_size)
            throw DataError(std::string(what) + " must be [" + std::to_string(in_channels) + "," +
                            std::to_string(image_size) + "," + std::to_string(image_size) +
                            "], got " + x.shape_str());
    }

    // f(x): frozen task-agnostic tokens, one [M_l, d_l] Var per level.
    std::vector<Var> encode_image(Tape<S>& t, Var x) {
        check_input(t.val(x), "image");
        std::vector<Var> feats = image_enc.fwd(t, x, t.input(emb0), nullptr);
        for (Var& v : feats) v = t.flatten_hw(v);
        return feats;
    }

    // g_task(y): condition tokens under the task's bias set.
    std::vector<Var> encode_condition(Tape<S>& t, Var y, const std::string& task_id) {
        check_input(t.val(y), "condition");
        BiasCtx<S> ctx = bias_ctx(task_id);
        std::vector<Var> feats = cond_enc.fwd(t, y, t.input(emb0), &ctx);
        for (Var& v : feats) v = t.flatten_hw(v);
        return feats;
    }

    PatchGrid<S> encode_image_patches(const Tensor<S>& x) {
        Tape<S> t(false);
        PatchGrid<S> out;
        for (Var v : encode_image(t, t.input(x))) out.levels.push_back(t.val(v));
        return out;
    }

    PatchGrid<S> encode_condition_patches(const Tensor<S>& y, const std::string& task_id) {
        Tape<S> t(false);
        PatchGrid<S> out;
        for (Var v : encode_condition(t, t.input(y), task_id)) out.levels.push_back(t.val(v));
        return out;
    }

    // New task's biases start from the elementwise mean of the registered
    // sets; the first task starts from the cloned template biases.
    TaskBiasSet<S>& register_task(const std::string& task_id) {
        if (task_id.empty()) throw ConfigError("task id must be non-empty");
        if (has_task(task_id)) throw ConfigError("task already registered: " + task_id);
        TaskBiasSet<S> set;
        set.task_id = task_id;
        set.biases.resize(cond_sites.size());
        for (size_t i = 0; i < cond_sites.size(); ++i) {
            Param<S>& b = set.biases[i];
            // "g.block0.conv1.b" -> "bias.<task>.block0.conv1.b"
            b.name = "bias." + task_id + "." + cond_sites[i]->name.substr(2);
            b.bias_site = int(i);
            if (task_bias.empty()) {
                b.value = image_sites[i]->value;  // template = frozen clone biases
            } else {
                b.value = Tensor<S>(cond_sites[i]->value.shape);
                for (const auto& [id, prev] : task_bias)
                    taxpy(S(1), prev.biases[i].value, b.value);
                S inv = S(1) / S(task_bias.size());
                for (auto& v : b.value.v) v *= inv;
            }
        }
        auto [it, ok] = task_bias.emplace(task_id, std::move(set));
        FSC_CHECK(ok, "task map insert");
        return it->second;
    }

    // Store view: image_encoder (frozen), cond_shared, task_bias/<id>.
    void collect_into(ParamStore<S>& store) {
        for (Param<S>* p : all_image()) store.add("image_encoder", p);
        for (Param<S>* p : all_shared()) store.add("cond_shared", p);
        for (auto& [id, set] : task_bias)
            for (Param<S>& b : set.biases) store.add("task_bias/" + id, &b);
    }

    std::vector<Param<S>*> all_image() {
        std::vector<Param<S>*> out;
        image_enc.visit([&](Param<S>& p) { out.push_back(&p); });
        return out;
    }

    std::vector<Param<S>*> all_shared() {
        std::vector<Param<S>*> out;
        cond_enc.visit([&](Param<S>& p) {
            if (p.bias_site < 0) out.push_back(&p);
        });
        return out;
    }
};

// Deep-copies the backbone encoder trunk into a frozen image encoder and a
// bias-tunable condition encoder. The per-task bias budget must stay within
// `bias_cap` of the shared weights.
template <typename S>
EncoderPair<S> clone_encoders(Backbone<S>& net, double bias_cap = 0.05) {
    EncoderPair<S> pair;
    pair.bias_cap = bias_cap;
    pair.in_channels = net.cfg.in_channels;
    pair.image_size = net.cfg.image_size;
    pair.image_enc = net.enc;
    pair.cond_enc = net.enc;
    auto rename = [](EncoderStack<S>& stack, const std::string& prefix) {
        stack.visit([&](Param<S>& p) {
            size_t dot = p.name.find('.');
            p.name = prefix + p.name.substr(dot);
        });
    };
    rename(pair.image_enc, "f");
    rename(pair.cond_enc, "g");
    pair.image_sites = pair.image_enc.assign_bias_sites();
    pair.cond_sites = pair.cond_enc.assign_bias_sites();
    FSC_CHECK(pair.image_sites.size() == pair.cond_sites.size(), "clone site mismatch");

    pair.image_enc.visit([](Param<S>& p) { p.trainable = false; });
    // g: weights and scales train; its own bias params are inert templates
    pair.cond_enc.visit([](Param<S>& p) { p.trainable = p.bias_site < 0; });

    if (pair.bias_fraction() > bias_cap)
        throw ConfigError("task bias budget " + std::to_string(pair.bias_fraction()) +
                          " exceeds cap " + std::to_string(bias_cap));

    {
        Tape<S> t(false);
        pair.emb0 = t.val(net.embed(t, 0, 0));
    }
    return pair;
}

}  // namespace fsc

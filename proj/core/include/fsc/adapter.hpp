#pragma once

// Few-shot control adapter: per-level patch-matching modules plus
// zero-initialized injection projections.
//
// A matching module answers "which support patches look like this query
// patch" with timestep-modulated cross-attention:
//
//   Q <- LN(Q), K <- LN(K)                      (parameter-free norms)
//   (alpha, beta, gamma) = Linear(t_emb)        (zero-initialized)
//   V <- LN(V) * (1 + alpha) + beta
//   O = concat-head attention(Q, K, V)          (softmax over all N*M keys)
//   I = O + gamma * gelu(O @ Wo)
//
// Q comes from the encoded query condition, K from encoded support
// conditions, V from encoded support images, so the output lives in the span
// of modulated support-image tokens. Each level's control map then enters the
// backbone through inject(): e + Z(I) with Z a zero-initialized 1x1
// projection, making a fresh adapter exactly transparent.

#include <string>
#include <utility>
#include <vector>

#include "fsc/encoders.hpp"

namespace fsc {

template <typename S>
struct MatchingModule {
    Param<S> wq, wk, wv, wo;  // [d,d], bias-free
    LinearLayer<S> mod;       // t_emb -> (alpha, beta, gamma), zero-init
    int d = 0, heads = 8;

    void init(const std::string& name, int d_, int d_t, int heads_, Rng& rng) {
        if (d_ % heads_ != 0)
            throw ConfigError("matching: heads must divide level width " + std::to_string(d_));
        d = d_;
        heads = heads_;
        auto mk = [&](Param<S>& p, const char* nm) {
            p.name = name + "." + nm;
            p.value = Tensor<S>({d, d});
            init_fan_in(p.value, d, rng, 1.0);
        };
        mk(wq, "wq");
        mk(wk, "wk");
        mk(wv, "wv");
        mk(wo, "wo");
        mod.init(name + ".mod", 3 * d, d_t, rng, /*zero=*/true);
    }

    // q [M,d], k/v row-aligned [NM,d], temb [d_t]; probs_out gets one
    // row-stochastic [M,NM] matrix per head.
    Var fwd(Tape<S>& t, Var q, Var k, Var v, Var temb,
            std::vector<Tensor<S>>* probs_out = nullptr) {
        const Tensor<S>&Q = t.val(q), &K = t.val(k), &V = t.val(v);
        if (Q.ndim() != 2 || Q.dim(1) != d || K.ndim() != 2 || K.dim(1) != d || V.ndim() != 2 ||
            V.dim(1) != d)
            throw DataError("matching: token width must be " + std::to_string(d));
        if (K.dim(0) != V.dim(0))
            throw DataError("matching: key/value rows misaligned (" + std::to_string(K.dim(0)) +
                            " vs " + std::to_string(V.dim(0)) + ")");
        Var qn = t.layer_norm_rows(q);
        Var kn = t.layer_norm_rows(k);
        Var vn = t.layer_norm_rows(v);
        Var abc = mod.fwd(t, temb);
        Var alpha = t.slice_vec(abc, 0, d);
        Var beta = t.slice_vec(abc, d, d);
        Var gamma = t.slice_vec(abc, 2 * d, d);
        Var vm = t.film_rows(vn, alpha, beta);
        Var o = t.mha(qn, kn, vm, t.use(wq), t.use(wk), t.use(wv), Var{}, Var{}, Var{}, heads,
                      probs_out);
        Var res = t.mul_row(t.act_gelu(t.linear(o, t.use(wo))), gamma);
        return t.add(o, res);
    }

    void visit(const ParamVisitor<S>& fn) {
        fn(wq);
        fn(wk);
        fn(wv);
        fn(wo);
        mod.visit(fn);
    }
};

// One support example: image and its condition rendering, as graph inputs.
template <typename S>
struct SupportSet {
    std::string task_id;
    std::vector<std::pair<Tensor<S>, Tensor<S>>> pairs;  // (image, condition)
};

template <typename S>
struct ControlAdapter {
    std::vector<MatchingModule<S>> match;  // L+1
    std::vector<Conv2dLayer<S>> proj;      // 1x1 zero-init, one per level
    std::vector<int> dims, sizes;          // d_l, h_l per level
    int d_t = 0;
    int max_support = 16;

    int levels() const { return int(match.size()); }

    void init(const BackboneConfig& cfg, int heads, Rng& rng) {
        int L = cfg.levels();
        d_t = cfg.time_embed_dim;
        dims.clear();
        sizes.clear();
        match.resize(size_t(L) + 1);
        proj.resize(size_t(L) + 1);
        for (int l = 0; l <= L; ++l) {
            int d = cfg.level_channels(std::min(l, L - 1));
            int h = cfg.level_size(std::min(l, L - 1));
            dims.push_back(d);
            sizes.push_back(h);
            std::string nm = "l" + std::to_string(l);
            match[size_t(l)].init("match." + nm, d, d_t, heads, rng);
            proj[size_t(l)].init("z." + nm, d, d, 1, 1, 0, rng, /*zero=*/true);
        }
    }

    // Control tokens per level for one query condition against a support set.
    // Everything stays on the tape so training reaches g, the task biases,
    // and the matching parameters.
    std::vector<Var> build_control(Tape<S>& t, EncoderPair<S>& enc, Var y_q,
                                   const std::vector<std::pair<Var, Var>>& support,
                                   const std::string& task_id, int timestep,
                                   std::vector<std::vector<Tensor<S>>>* probs_out = nullptr) {
        if (support.empty()) throw DataError("control: support set is empty");
        if (int(support.size()) > max_support)
            throw DataError("control: support size " + std::to_string(support.size()) +
                            " exceeds limit " + std::to_string(max_support));
        std::vector<Var> q = enc.encode_condition(t, y_q, task_id);
        FSC_CHECK(int(q.size()) == levels(), "control: level count");
        std::vector<std::vector<Var>> ks(q.size()), vs(q.size());
        for (const auto& [img, cond] : support) {
            std::vector<Var> ki = enc.encode_condition(t, cond, task_id);
            std::vector<Var> vi = enc.encode_image(t, img);
            for (size_t l = 0; l < q.size(); ++l) {
                ks[l].push_back(ki[l]);
                vs[l].push_back(vi[l]);
            }
        }
        Var temb = t.input(timestep_embedding<S>(timestep, d_t));
        std::vector<Var> out(q.size());
        for (size_t l = 0; l < q.size(); ++l) {
            std::vector<Tensor<S>> probs;
            out[l] = match[l].fwd(t, q[l], t.concat_rows(ks[l]), t.concat_rows(vs[l]), temb,
                                  probs_out ? &probs : nullptr);
            if (probs_out) probs_out->push_back(std::move(probs));
        }
        return out;
    }

    // Value-level encodings of one query condition and its support set, so a
    // sampling loop can rebuild control tokens per timestep without re-running
    // the encoders. Inputs are signed ([-1,1]) tensors.
    struct Cache {
        std::vector<Tensor<S>> q, K, V;  // per level: [M,d], [N*M,d], [N*M,d]
    };

    Cache precompute(EncoderPair<S>& enc,
                     const std::vector<std::pair<Tensor<S>, Tensor<S>>>& support,
                     const Tensor<S>& y_q, const std::string& task_id) {
        if (support.empty()) throw DataError("control: support set is empty");
        if (int(support.size()) > max_support)
            throw DataError("control: support size " + std::to_string(support.size()) +
                            " exceeds limit " + std::to_string(max_support));
        Tape<S> t;
        std::vector<Var> q = enc.encode_condition(t, t.input(y_q), task_id);
        FSC_CHECK(int(q.size()) == levels(), "control: level count");
        std::vector<std::vector<Var>> ks(q.size()), vs(q.size());
        for (const auto& [img, cond] : support) {
            std::vector<Var> ki = enc.encode_condition(t, t.input(cond), task_id);
            std::vector<Var> vi = enc.encode_image(t, t.input(img));
            for (size_t l = 0; l < q.size(); ++l) {
                ks[l].push_back(ki[l]);
                vs[l].push_back(vi[l]);
            }
        }
        Cache c;
        for (size_t l = 0; l < q.size(); ++l) {
            c.q.push_back(t.val(q[l]));
            c.K.push_back(t.val(t.concat_rows(ks[l])));
            c.V.push_back(t.val(t.concat_rows(vs[l])));
        }
        return c;
    }

    // Same arithmetic as build_control on the cached encodings; outputs are
    // bit-identical to the training path for equal inputs.
    std::vector<Var> build_control_cached(Tape<S>& t, const Cache& c, int timestep) {
        FSC_CHECK(int(c.q.size()) == levels(), "control: cache level count");
        Var temb = t.input(timestep_embedding<S>(timestep, d_t));
        std::vector<Var> out;
        for (size_t l = 0; l < c.q.size(); ++l)
            out.push_back(match[l].fwd(t, t.input(c.q[l]), t.input(c.K[l]), t.input(c.V[l]),
                                       temb, nullptr));
        return out;
    }

    // e^l + Z^l(I^l), with I given as [M,d] tokens.
    Var inject(Tape<S>& t, int level, Var e, Var tokens) {
        const auto& es = t.val(e).shape;
        if (int(es.size()) != 3)
            throw DataError("inject: feature must be [C,H,W], got " + t.val(e).shape_str());
        const auto& ts = t.val(tokens).shape;
        if (int(ts.size()) != 2 || ts[0] != es[1] * es[2] || ts[1] != es[0])
            throw DataError("inject: control " + t.val(tokens).shape_str() + " vs feature " +
                            t.val(e).shape_str() + " at level " + std::to_string(level));
        Var img = t.unflatten_hw(tokens, es[1], es[2]);
        return t.add(e, proj[size_t(level)].fwd(t, img));
    }

    // Backbone tap applying inject() at every level.
    LevelTap<S> make_tap(Tape<S>& t, std::vector<Var> control) {
        FSC_CHECK(int(control.size()) == levels(), "tap: control level count");
        return [this, &t, control](int l, Var e) { return inject(t, l, e, control[size_t(l)]); };
    }

    void collect_into(ParamStore<S>& store) {
        for (auto& m : match) m.visit([&](Param<S>& p) { store.add("matching", &p); });
        for (auto& z : proj) z.visit([&](Param<S>& p) { store.add("projections", &p); });
    }

    int64_t param_count() {
        int64_t n = 0;
        auto fn = [&](Param<S>& p) { n += p.value.numel(); };
        for (auto& m : match) m.visit(fn);
        for (auto& z : proj) z.visit(fn);
        return n;
    }
};

}  // namespace fsc

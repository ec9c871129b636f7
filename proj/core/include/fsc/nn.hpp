#pragma once

// Layer building blocks over the tape: conv / group norm / linear / residual
// block with timestep-affine modulation / self-attention block. Each layer
// owns its Params and exposes visit() in a fixed order for registration and
// checkpointing.
//
// Bias override: encoder stacks can run with per-task bias sets. Every
// bias-carrying Param gets a site index; forward passes resolve the active
// bias through an optional BiasCtx (site-indexed vector of Param pointers).

#include <functional>
#include <string>
#include <vector>

#include "fsc/tape.hpp"

namespace fsc {

template <typename S>
using BiasCtx = std::vector<Param<S>*>;

template <typename S>
using ParamVisitor = std::function<void(Param<S>&)>;

template <typename S>
inline Param<S>& pick_bias(Param<S>& own, const BiasCtx<S>* ctx) {
    if (ctx && own.bias_site >= 0) {
        FSC_CHECK(own.bias_site < int(ctx->size()), "bias site out of range");
        return *(*ctx)[size_t(own.bias_site)];
    }
    return own;
}

inline int norm_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

// He-normal for a fan-in
template <typename S>
void init_fan_in(Tensor<S>& w, int fan_in, Rng& rng, double gain = 2.0) {
    w.fill_normal(rng, S(std::sqrt(gain / double(fan_in))));
}

// ---- conv ----

template <typename S>
struct Conv2dLayer {
    Param<S> w, b;  // [O,C,k,k], [O]
    int stride = 1, pad = 0;

    void init(const std::string& name, int out_ch, int in_ch, int k, int stride_, int pad_,
              Rng& rng, bool zero = false) {
        stride = stride_;
        pad = pad_;
        w.name = name + ".w";
        w.value = Tensor<S>({out_ch, in_ch, k, k});
        if (!zero) init_fan_in(w.value, in_ch * k * k, rng);
        b.name = name + ".b";
        b.value = Tensor<S>({out_ch});
    }

    Var fwd(Tape<S>& t, Var x, const BiasCtx<S>* ctx = nullptr) {
        return t.conv2d(x, t.use(w), t.use(pick_bias(b, ctx)), stride, pad);
    }

    void visit(const ParamVisitor<S>& fn) {
        fn(w);
        fn(b);
    }
};

// ---- group norm (scale shared, shift overridable) ----

template <typename S>
struct GroupNormLayer {
    Param<S> scale, shift;  // [C]
    int groups = 1;

    void init(const std::string& name, int ch) {
        groups = norm_groups(ch);
        scale.name = name + ".scale";
        scale.value = Tensor<S>::full({ch}, S(1));
        shift.name = name + ".shift";
        shift.value = Tensor<S>({ch});
    }

    Var fwd(Tape<S>& t, Var x, const BiasCtx<S>* ctx = nullptr) {
        return t.group_norm(x, t.use(scale), t.use(pick_bias(shift, ctx)), groups);
    }

    void visit(const ParamVisitor<S>& fn) {
        fn(scale);
        fn(shift);
    }
};

// ---- linear ----

template <typename S>
struct LinearLayer {
    Param<S> w, b;  // [dout,din], [dout]

    void init(const std::string& name, int dout, int din, Rng& rng, bool zero = false) {
        w.name = name + ".w";
        w.value = Tensor<S>({dout, din});
        if (!zero) init_fan_in(w.value, din, rng, 1.0);
        b.name = name + ".b";
        b.value = Tensor<S>({dout});
    }

    Var fwd(Tape<S>& t, Var x, const BiasCtx<S>* ctx = nullptr) {
        return t.linear(x, t.use(w), t.use(pick_bias(b, ctx)));
    }

    void visit(const ParamVisitor<S>& fn) {
        fn(w);
        fn(b);
    }
};

// ---- residual block ----
//
//   h = conv1(silu(gn1(x)))            # in -> out
//   (s, c) = temb_lin(silu(emb))       # d_t -> 2*out
//   h = gn2(h) * (1 + s) + c           # per-channel affine
//   h = conv2(silu(h))                 # out -> out
//   y = h + skip(x)                    # 1x1 conv when in != out

template <typename S>
struct ResBlock {
    GroupNormLayer<S> gn1, gn2;
    Conv2dLayer<S> conv1, conv2, skip;
    LinearLayer<S> temb;
    int in_ch = 0, out_ch = 0;

    void init(const std::string& name, int in, int out, int d_t, Rng& rng) {
        in_ch = in;
        out_ch = out;
        gn1.init(name + ".gn1", in);
        conv1.init(name + ".conv1", out, in, 3, 1, 1, rng);
        temb.init(name + ".temb", 2 * out, d_t, rng);
        gn2.init(name + ".gn2", out);
        conv2.init(name + ".conv2", out, out, 3, 1, 1, rng);
        if (in != out) skip.init(name + ".skip", out, in, 1, 1, 0, rng);
    }

    Var fwd(Tape<S>& t, Var x, Var emb, const BiasCtx<S>* ctx = nullptr) {
        Var h = conv1.fwd(t, t.act_silu(gn1.fwd(t, x, ctx)), ctx);
        Var sc = temb.fwd(t, t.act_silu(emb), ctx);
        Var s = t.slice_vec(sc, 0, out_ch);
        Var c = t.slice_vec(sc, out_ch, out_ch);
        h = t.film_ch(gn2.fwd(t, h, ctx), s, c);
        h = conv2.fwd(t, t.act_silu(h), ctx);
        Var sk = (in_ch == out_ch) ? x : skip.fwd(t, x, ctx);
        return t.add(h, sk);
    }

    void visit(const ParamVisitor<S>& fn) {
        gn1.visit(fn);
        conv1.visit(fn);
        temb.visit(fn);
        gn2.visit(fn);
        conv2.visit(fn);
        if (in_ch != out_ch) skip.visit(fn);
    }
};

// ---- self-attention over the spatial grid ----

template <typename S>
struct AttnBlock {
    GroupNormLayer<S> gn;
    Param<S> wq, wk, wv, bq, bk, bv;  // [d,d] / [d]
    LinearLayer<S> proj;
    int heads = 1, ch = 0;

    void init(const std::string& name, int d, int heads_, Rng& rng) {
        FSC_CHECK(d % heads_ == 0, "attention heads must divide channels");
        heads = heads_;
        ch = d;
        gn.init(name + ".gn", d);
        auto mk = [&](Param<S>& p, const char* nm, bool is_bias) {
            p.name = name + "." + nm;
            p.value = is_bias ? Tensor<S>({d}) : Tensor<S>({d, d});
            if (!is_bias) init_fan_in(p.value, d, rng, 1.0);
        };
        mk(wq, "wq", false);
        mk(wk, "wk", false);
        mk(wv, "wv", false);
        mk(bq, "bq", true);
        mk(bk, "bk", true);
        mk(bv, "bv", true);
        proj.init(name + ".proj", d, d, rng);
    }

    Var fwd(Tape<S>& t, Var x, const BiasCtx<S>* ctx = nullptr) {
        const auto& shape = t.val(x).shape;
        int H = shape[1], W = shape[2];
        Var tok = t.flatten_hw(gn.fwd(t, x, ctx));
        Var att = t.mha(tok, tok, tok, t.use(wq), t.use(wk), t.use(wv),
                        t.use(pick_bias(bq, ctx)), t.use(pick_bias(bk, ctx)),
                        t.use(pick_bias(bv, ctx)), heads);
        Var out = proj.fwd(t, att, ctx);
        return t.add(x, t.unflatten_hw(out, H, W));
    }

    void visit(const ParamVisitor<S>& fn) {
        gn.visit(fn);
        fn(wq);
        fn(wk);
        fn(wv);
        fn(bq);
        fn(bk);
        fn(bv);
        proj.visit(fn);
    }
};

}  // namespace fsc

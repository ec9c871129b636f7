#pragma once

// Pixel-space denoising UNet.
//
// Encoder: stem conv, one residual block per resolution level (stride-2 conv
// between levels), self-attention at the coarsest level only, then a mid
// residual block. encode() returns L+1 feature maps: one per level plus mid.
// Decoder: mirror path with skip concatenation and a zero-initialized output
// head, so a fresh model predicts exactly zero.
//
// Conditioning: sinusoidal timestep embedding through a 2-layer MLP, plus a
// learned embedding of the discrete scene descriptor (id 0 = null row used
// for classifier-free guidance), projected and summed into one vector that
// modulates every residual block.
//
// Control injection: forward() accepts an optional per-level tap applied to
// each encoder feature before the decoder consumes it. Absent tap is
// bit-identical to an identity tap.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fsc/nn.hpp"

namespace fsc {

struct BackboneConfig {
    int in_channels = 3;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int time_embed_dim = 128;
    int cond_embed_dim = 128;
    int image_size = 32;
    int attn_heads = 4;
    int descriptor_rows = 8;  // ids 0..7, 0 = null

    int levels() const { return int(channel_multipliers.size()); }

    int level_channels(int l) const { return base_channels * channel_multipliers[size_t(l)]; }

    int level_size(int l) const { return image_size >> l; }

    void validate() const {
        if (in_channels <= 0 || base_channels <= 0 || time_embed_dim <= 0 ||
            cond_embed_dim <= 0 || image_size <= 0 || attn_heads <= 0 || descriptor_rows < 1)
            throw ConfigError("backbone: dimensions must be positive");
        if (channel_multipliers.empty())
            throw ConfigError("backbone: channel_multipliers must be non-empty");
        for (int m : channel_multipliers)
            if (m <= 0) throw ConfigError("backbone: channel multipliers must be positive");
        int down = 1 << (levels() - 1);
        if (image_size % down != 0)
            throw ConfigError("backbone: image_size must be divisible by 2^(levels-1)");
        if (time_embed_dim % 2 != 0)
            throw ConfigError("backbone: time_embed_dim must be even");
        int coarse = level_channels(levels() - 1);
        if (coarse % attn_heads != 0)
            throw ConfigError("backbone: attn_heads must divide coarsest channels");
    }
};

// Sinusoidal embedding of a discrete timestep: first half sines, second half
// cosines, frequencies 10000^(-2i/dim). t=0 gives zeros then ones.
template <typename S>
Tensor<S> timestep_embedding(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be positive and even");
    Tensor<S> out({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * (2.0 * i / double(dim)));
        double a = double(t) * freq;
        out.v[size_t(i)] = S(std::sin(a));
        out.v[size_t(half + i)] = S(std::cos(a));
    }
    return out;
}

// Encoder trunk shared by the backbone and by the frozen image / condition
// encoder clones. Owns stem, per-level blocks, coarsest-level attention, mid.
template <typename S>
struct EncoderStack {
    std::vector<int> mults;
    int base = 0, in_ch = 0, d_t = 0, heads = 1;
    Conv2dLayer<S> stem;
    std::vector<Conv2dLayer<S>> down;  // [L-1] stride-2
    std::vector<ResBlock<S>> block;    // [L]
    AttnBlock<S> attn;                 // coarsest level
    ResBlock<S> mid;

    int levels() const { return int(mults.size()); }

    void init(const std::string& name, const BackboneConfig& cfg, Rng& rng) {
        mults = cfg.channel_multipliers;
        base = cfg.base_channels;
        in_ch = cfg.in_channels;
        d_t = cfg.time_embed_dim;
        heads = cfg.attn_heads;
        int L = levels();
        stem.init(name + ".stem", base, in_ch, 3, 1, 1, rng);
        down.resize(size_t(L) - 1);
        block.resize(size_t(L));
        int prev = base;
        for (int l = 0; l < L; ++l) {
            if (l > 0) {
                down[size_t(l) - 1].init(name + ".down" + std::to_string(l), prev, prev, 3, 2, 1, rng);
            }
            int out = base * mults[size_t(l)];
            block[size_t(l)].init(name + ".block" + std::to_string(l), prev, out, d_t, rng);
            prev = out;
        }
        attn.init(name + ".attn", prev, heads, rng);
        mid.init(name + ".mid", prev, prev, d_t, rng);
    }

    // L+1 feature maps: per-level outputs then mid.
    std::vector<Var> fwd(Tape<S>& t, Var x, Var emb, const BiasCtx<S>* ctx = nullptr) {
        int L = levels();
        std::vector<Var> feats;
        feats.reserve(size_t(L) + 1);
        Var h = stem.fwd(t, x, ctx);
        for (int l = 0; l < L; ++l) {
            if (l > 0) h = down[size_t(l) - 1].fwd(t, h, ctx);
            h = block[size_t(l)].fwd(t, h, emb, ctx);
            if (l == L - 1) h = attn.fwd(t, h, ctx);
            feats.push_back(h);
        }
        feats.push_back(mid.fwd(t, h, emb, ctx));
        return feats;
    }

    void visit(const ParamVisitor<S>& fn) {
        stem.visit(fn);
        for (int l = 0; l < levels(); ++l) {
            if (l > 0) down[size_t(l) - 1].visit(fn);
            block[size_t(l)].visit(fn);
        }
        attn.visit(fn);
        mid.visit(fn);
    }

    // Bias-carrying params in declaration order; assigns site ids as it goes.
    std::vector<Param<S>*> assign_bias_sites() {
        std::vector<Param<S>*> sites;
        visit([&](Param<S>& p) {
            size_t dot = p.name.rfind('.');
            std::string leaf = dot == std::string::npos ? p.name : p.name.substr(dot + 1);
            bool is_site = leaf == "b" || leaf == "bq" || leaf == "bk" || leaf == "bv" ||
                           leaf == "shift";
            if (is_site) {
                p.bias_site = int(sites.size());
                sites.push_back(&p);
            }
        });
        return sites;
    }

    int64_t param_count() {
        int64_t n = 0;
        visit([&](Param<S>& p) { n += p.value.numel(); });
        return n;
    }
};

// Tap applied to encoder feature `level` (0..L-1, L = mid); must return a
// Var with the same shape.
template <typename S>
using LevelTap = std::function<Var(int level, Var feat)>;

template <typename S>
struct Backbone {
    BackboneConfig cfg;
    EncoderStack<S> enc;
    LinearLayer<S> time1, time2;  // d_t -> d_t
    Param<S> desc_table;          // [rows, cond_dim]
    LinearLayer<S> cond_proj;     // cond_dim -> d_t
    std::vector<ResBlock<S>> dec;   // [L], coarse to fine
    std::vector<Conv2dLayer<S>> up; // [L-1] after-upsample conv
    GroupNormLayer<S> head_gn;
    Conv2dLayer<S> head;

    void init(const BackboneConfig& cfg_, Rng& rng) {
        cfg = cfg_;
        cfg.validate();
        int L = cfg.levels(), d_t = cfg.time_embed_dim;
        enc.init("enc", cfg, rng);
        time1.init("time1", d_t, d_t, rng);
        time2.init("time2", d_t, d_t, rng);
        desc_table.name = "desc_table";
        desc_table.value = Tensor<S>({cfg.descriptor_rows, cfg.cond_embed_dim});
        desc_table.value.fill_normal(rng, S(0.02));
        cond_proj.init("cond_proj", d_t, cfg.cond_embed_dim, rng);
        dec.resize(size_t(L));
        up.resize(size_t(L) - 1);
        for (int l = L - 1; l >= 0; --l) {
            int ch = cfg.level_channels(l);
            dec[size_t(l)].init("dec" + std::to_string(l), 2 * ch, ch, d_t, rng);
            if (l > 0)
                up[size_t(l) - 1].init("up" + std::to_string(l), cfg.level_channels(l - 1), ch, 3, 1, 1, rng);
        }
        head_gn.init("head_gn", cfg.base_channels);
        head.init("head", cfg.in_channels, cfg.base_channels, 3, 1, 1, rng, /*zero=*/true);
    }

    // Combined modulation vector: MLP(sinusoidal(t)) + proj(descriptor row).
    Var embed(Tape<S>& t, int timestep, int desc_id) {
        if (desc_id < 0 || desc_id >= cfg.descriptor_rows)
            throw DataError("descriptor id out of range");
        Var ts = t.input(timestep_embedding<S>(timestep, cfg.time_embed_dim));
        Var te = time2.fwd(t, t.act_silu(time1.fwd(t, ts)));
        Var ce = cond_proj.fwd(t, t.embed_row(t.use(desc_table), desc_id));
        return t.add(te, ce);
    }

    std::vector<Var> encode(Tape<S>& t, Var z, Var emb) { return enc.fwd(t, z, emb); }

    // Predict noise. `tap` (optional) rewrites each encoder feature before
    // the decoder consumes it; levels 0..L-1 then L for mid.
    Var forward(Tape<S>& t, Var z, int timestep, int desc_id, const LevelTap<S>* tap = nullptr) {
        const auto& zs = t.val(z).shape;
        if (int(zs.size()) != 3 || zs[0] != cfg.in_channels || zs[1] != cfg.image_size ||
            zs[2] != cfg.image_size)
            throw DataError("backbone: input must be [" + std::to_string(cfg.in_channels) + "," +
                            std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                            "], got " + t.val(z).shape_str());
        Var emb = embed(t, timestep, desc_id);
        std::vector<Var> feats = encode(t, z, emb);
        if (tap && *tap) {
            for (int l = 0; l < int(feats.size()); ++l) {
                Var g = (*tap)(l, feats[size_t(l)]);
                if (!g.ok() || !t.val(g).same_shape(t.val(feats[size_t(l)])))
                    throw DataError("control tap at level " + std::to_string(l) +
                                    " must preserve shape " + t.val(feats[size_t(l)]).shape_str());
                feats[size_t(l)] = g;
            }
        }
        int L = cfg.levels();
        Var h = feats[size_t(L)];  // mid
        for (int l = L - 1; l >= 0; --l) {
            h = t.concat_ch(h, feats[size_t(l)]);
            h = dec[size_t(l)].fwd(t, h, emb);
            if (l > 0) h = up[size_t(l) - 1].fwd(t, t.upsample2(h));
        }
        h = t.act_silu(head_gn.fwd(t, h));
        return head.fwd(t, h);
    }

    void visit(const ParamVisitor<S>& fn) {
        enc.visit(fn);
        time1.visit(fn);
        time2.visit(fn);
        fn(desc_table);
        cond_proj.visit(fn);
        for (int l = 0; l < cfg.levels(); ++l) dec[size_t(l)].visit(fn);
        for (auto& u : up) u.visit(fn);
        head_gn.visit(fn);
        head.visit(fn);
    }

    int64_t param_count() {
        int64_t n = 0;
        visit([&](Param<S>& p) { n += p.value.numel(); });
        return n;
    }
};

}  // namespace fsc

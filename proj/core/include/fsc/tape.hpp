#pragma once

// Reverse-mode autodiff on a flat tape, templated on scalar so training runs
// in float while gradient checks run the identical code in double.
//
// Design notes:
//  - one node per op output; backward walks nodes in reverse creation order,
//    so accumulation order is fixed and runs are bit-reproducible.
//  - a Param used twice maps to one leaf node (grads accumulate there).
//  - needs-grad propagates forward; backward lambdas skip inputs that don't
//    need gradients, which is what keeps frozen-backbone steps cheap.
//  - convs recompute im2col in backward instead of storing the column matrix;
//    attention recomputes softmax probabilities per head from saved row stats.

#include <cstring>
#include <functional>
#include <unordered_map>
#include <vector>

#include "fsc/fastmath.hpp"
#include "fsc/tensor.hpp"

namespace fsc {

template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    bool trainable = true;
    int bias_site = -1;  // >= 0 marks a per-task bias slot in an encoder stack

    // gradient sink, managed by Tape::backward / optimizer
    Tensor<S> grad;
    bool has_grad = false;

    void zero_grad() {
        has_grad = false;
        grad = Tensor<S>();
    }
};

struct Var {
    int id = -1;
    bool ok() const { return id >= 0; }
};

// ---- im2col / col2im (shared by conv forward and backward) ----

template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, S* col, int Ho,
            int Wo) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                S* dst = col + (int64_t(c * kh + ky) * kw + kx) * (int64_t(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst + int64_t(oy) * Wo, 0, sizeof(S) * size_t(Wo));
                        continue;
                    }
                    const S* src = x + (int64_t(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[int64_t(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, S* x,
                int Ho, int Wo) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const S* src = col + (int64_t(c * kh + ky) * kw + kx) * (int64_t(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = x + (int64_t(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[int64_t(oy) * Wo + ox];
                    }
                }
            }
}

template <typename S>
class Tape {
  public:
    struct Node {
        Tensor<S> val;
        Tensor<S> grad;  // allocated on first accumulation
        std::function<void()> back;
        bool needs = false;
        Param<S>* bound = nullptr;
        std::vector<Tensor<S>> aux;  // saved-for-backward tensors
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    const Tensor<S>& val(Var v) const { return nodes_[size_t(v.id)].val; }
    const Tensor<S>* grad(Var v) const {
        const Node& n = nodes_[size_t(v.id)];
        return n.grad.empty() ? nullptr : &n.grad;
    }

    Var input(Tensor<S> v) { return push(std::move(v), false); }

    // Leaf for a parameter; repeated use returns the same node.
    Var use(Param<S>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return Var{it->second};
        Var v = push(p.value, grad_enabled_ && p.trainable);
        nodes_[size_t(v.id)].bound = &p;
        param_nodes_.emplace(&p, v.id);
        return v;
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        FSC_CHECK(A.numel() == B.numel(), "add shape");
        Tensor<S> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += B[i];
        Var o = push(std::move(out), needs(a) || needs(b));
        if (track(o)) set_back(o, [this, o, a, b] {
            const Tensor<S>& g = gref(o);
            if (needs(a)) accum_eq(a, g);
            if (needs(b)) accum_eq(b, g);
        });
        return o;
    }

    Var sub(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        FSC_CHECK(A.numel() == B.numel(), "sub shape");
        Tensor<S> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
        Var o = push(std::move(out), needs(a) || needs(b));
        if (track(o)) set_back(o, [this, o, a, b] {
            const Tensor<S>& g = gref(o);
            if (needs(a)) accum_eq(a, g);
            if (needs(b)) {
                Tensor<S> gb = g;
                for (auto& x : gb.v) x = -x;
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    Var mul(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        FSC_CHECK(A.numel() == B.numel(), "mul shape");
        Tensor<S> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
        Var o = push(std::move(out), needs(a) || needs(b));
        if (track(o)) set_back(o, [this, o, a, b] {
            const Tensor<S>& g = gref(o);
            if (needs(a)) {
                Tensor<S> ga = g;
                const Tensor<S>& B2 = val(b);
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= B2[i];
                accum_move(a, std::move(ga));
            }
            if (needs(b)) {
                Tensor<S> gb = g;
                const Tensor<S>& A2 = val(a);
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= A2[i];
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    Var scale(Var a, S c) {
        Tensor<S> out = val(a);
        for (auto& x : out.v) x *= c;
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a, c] {
            Tensor<S> g = gref(o);
            for (auto& x : g.v) x *= c;
            accum_move(a, std::move(g));
        });
        return o;
    }

    // ---- activations ----

    Var act_silu(Var a) {
        Tensor<S> out = val(a);
        for (auto& x : out.v) x = fsc::silu(x);
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a] {
            Tensor<S> g = gref(o);
            const Tensor<S>& X = val(a);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= silu_grad(X[i]);
            accum_move(a, std::move(g));
        });
        return o;
    }

    Var act_gelu(Var a) {
        Tensor<S> out = val(a);
        for (auto& x : out.v) x = fsc::gelu(x);
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a] {
            Tensor<S> g = gref(o);
            const Tensor<S>& X = val(a);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= gelu_grad(X[i]);
            accum_move(a, std::move(g));
        });
        return o;
    }

    // ---- shape ops ----

    // [C,H,W] -> [H*W, C] row-major tokens (token index = y*W + x)
    Var flatten_hw(Var a) {
        const Tensor<S>& X = val(a);
        int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        Tensor<S> out({H * W, C});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H * W; ++i) out[int64_t(i) * C + c] = X[int64_t(c) * H * W + i];
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a, C, H, W] {
            const Tensor<S>& g = gref(o);
            Tensor<S> gx({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H * W; ++i) gx[int64_t(c) * H * W + i] = g[int64_t(i) * C + c];
            accum_move(a, std::move(gx));
        });
        return o;
    }

    // [M, C] -> [C, H, W] with M == H*W
    Var unflatten_hw(Var a, int H, int W) {
        const Tensor<S>& X = val(a);
        int M = X.dim(0), C = X.dim(1);
        FSC_CHECK(M == H * W, "unflatten_hw token count");
        Tensor<S> out({C, H, W});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < M; ++i) out[int64_t(c) * M + i] = X[int64_t(i) * C + c];
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a, C, M] {
            const Tensor<S>& g = gref(o);
            Tensor<S> gx({M, C});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < M; ++i) gx[int64_t(i) * C + c] = g[int64_t(c) * M + i];
            accum_move(a, std::move(gx));
        });
        return o;
    }

    Var concat_ch(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        int Ca = A.dim(0), Cb = B.dim(0), H = A.dim(1), W = A.dim(2);
        FSC_CHECK(B.dim(1) == H && B.dim(2) == W, "concat_ch spatial");
        Tensor<S> out({Ca + Cb, H, W});
        std::memcpy(out.data(), A.data(), sizeof(S) * size_t(A.numel()));
        std::memcpy(out.data() + A.numel(), B.data(), sizeof(S) * size_t(B.numel()));
        Var o = push(std::move(out), needs(a) || needs(b));
        if (track(o)) set_back(o, [this, o, a, b, Ca, Cb, H, W] {
            const Tensor<S>& g = gref(o);
            if (needs(a)) {
                Tensor<S> ga({Ca, H, W});
                std::memcpy(ga.data(), g.data(), sizeof(S) * size_t(ga.numel()));
                accum_move(a, std::move(ga));
            }
            if (needs(b)) {
                Tensor<S> gb({Cb, H, W});
                std::memcpy(gb.data(), g.data() + int64_t(Ca) * H * W, sizeof(S) * size_t(gb.numel()));
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    // stack token matrices [M_i,d] along rows -> [sum M_i, d]
    Var concat_rows(const std::vector<Var>& xs) {
        FSC_CHECK(!xs.empty(), "concat_rows of nothing");
        int d = val(xs[0]).dim(1);
        int64_t rows = 0;
        bool any = false;
        for (Var v : xs) {
            FSC_CHECK(val(v).ndim() == 2 && val(v).dim(1) == d, "concat_rows width");
            rows += val(v).dim(0);
            any = any || needs(v);
        }
        Tensor<S> out({int(rows), d});
        int64_t off = 0;
        for (Var v : xs) {
            const Tensor<S>& X = val(v);
            std::memcpy(out.data() + off * d, X.data(), sizeof(S) * size_t(X.numel()));
            off += X.dim(0);
        }
        Var o = push(std::move(out), any);
        if (track(o)) set_back(o, [this, o, xs, d] {
            const Tensor<S>& g = gref(o);
            int64_t off2 = 0;
            for (Var v : xs) {
                int m = val(v).dim(0);
                if (needs(v)) {
                    Tensor<S> gv({m, d});
                    std::memcpy(gv.data(), g.data() + off2 * d, sizeof(S) * size_t(gv.numel()));
                    accum_move(v, std::move(gv));
                }
                off2 += m;
            }
        });
        return o;
    }

    Var upsample2(Var a) {  // nearest-neighbour x2
        const Tensor<S>& X = val(a);
        int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        Tensor<S> out({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int x = 0; x < 2 * W; ++x)
                    out[(int64_t(c) * 2 * H + y) * 2 * W + x] =
                        X[(int64_t(c) * H + y / 2) * W + x / 2];
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a, C, H, W] {
            const Tensor<S>& g = gref(o);
            Tensor<S> gx({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int x = 0; x < 2 * W; ++x)
                        gx[(int64_t(c) * H + y / 2) * W + x / 2] +=
                            g[(int64_t(c) * 2 * H + y) * 2 * W + x];
            accum_move(a, std::move(gx));
        });
        return o;
    }

    Var slice_vec(Var a, int off, int len) {
        const Tensor<S>& X = val(a);
        FSC_CHECK(X.ndim() == 1 && off + len <= X.dim(0), "slice_vec range");
        Tensor<S> out({len});
        std::memcpy(out.data(), X.data() + off, sizeof(S) * size_t(len));
        Var o = push(std::move(out), needs(a));
        if (track(o)) set_back(o, [this, o, a, off, len] {
            const Tensor<S>& g = gref(o);
            Tensor<S> gx({val(a).dim(0)});
            std::memcpy(gx.data() + off, g.data(), sizeof(S) * size_t(len));
            accum_move(a, std::move(gx));
        });
        return o;
    }

    // ---- broadcasted affine ----

    // rows of x scaled/shifted: y = x * (1 + alpha) + beta, alpha/beta [d]
    Var film_rows(Var x, Var alpha, Var beta) {
        const Tensor<S>& X = val(x);
        const Tensor<S>&A = val(alpha), &B = val(beta);
        int M = X.dim(0), d = X.dim(1);
        FSC_CHECK(A.dim(0) == d && B.dim(0) == d, "film_rows dims");
        Tensor<S> out({M, d});
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < d; ++j)
                out[int64_t(i) * d + j] = X[int64_t(i) * d + j] * (S(1) + A[j]) + B[j];
        Var o = push(std::move(out), needs(x) || needs(alpha) || needs(beta));
        if (track(o)) set_back(o, [this, o, x, alpha, beta, M, d] {
            const Tensor<S>& g = gref(o);
            const Tensor<S>& X2 = val(x);
            const Tensor<S>& A2 = val(alpha);
            if (needs(x)) {
                Tensor<S> gx({M, d});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < d; ++j)
                        gx[int64_t(i) * d + j] = g[int64_t(i) * d + j] * (S(1) + A2[j]);
                accum_move(x, std::move(gx));
            }
            if (needs(alpha)) {
                Tensor<S> ga({d});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < d; ++j) ga[j] += g[int64_t(i) * d + j] * X2[int64_t(i) * d + j];
                accum_move(alpha, std::move(ga));
            }
            if (needs(beta)) {
                Tensor<S> gb({d});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < d; ++j) gb[j] += g[int64_t(i) * d + j];
                accum_move(beta, std::move(gb));
            }
        });
        return o;
    }

    // per-channel affine on a feature map: y = x * (1 + s) + b, s/b [C]
    Var film_ch(Var x, Var s, Var b) {
        const Tensor<S>& X = val(x);
        const Tensor<S>&Sv = val(s), &B = val(b);
        int C = X.dim(0), HW = X.dim(1) * X.dim(2);
        FSC_CHECK(Sv.dim(0) == C && B.dim(0) == C, "film_ch dims");
        Tensor<S> out = X;
        for (int c = 0; c < C; ++c) {
            S m = S(1) + Sv[c], a = B[c];
            for (int i = 0; i < HW; ++i) out[int64_t(c) * HW + i] = out[int64_t(c) * HW + i] * m + a;
        }
        Var o = push(std::move(out), needs(x) || needs(s) || needs(b));
        if (track(o)) set_back(o, [this, o, x, s, b, C, HW] {
            const Tensor<S>& g = gref(o);
            const Tensor<S>& X2 = val(x);
            const Tensor<S>& S2 = val(s);
            if (needs(x)) {
                Tensor<S> gx = g;
                for (int c = 0; c < C; ++c) {
                    S m = S(1) + S2[c];
                    for (int i = 0; i < HW; ++i) gx[int64_t(c) * HW + i] *= m;
                }
                accum_move(x, std::move(gx));
            }
            if (needs(s)) {
                Tensor<S> gs({C});
                for (int c = 0; c < C; ++c) {
                    S acc = 0;
                    for (int i = 0; i < HW; ++i)
                        acc += g[int64_t(c) * HW + i] * X2[int64_t(c) * HW + i];
                    gs[c] = acc;
                }
                accum_move(s, std::move(gs));
            }
            if (needs(b)) {
                Tensor<S> gb({C});
                for (int c = 0; c < C; ++c) {
                    S acc = 0;
                    for (int i = 0; i < HW; ++i) acc += g[int64_t(c) * HW + i];
                    gb[c] = acc;
                }
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    // y = x * v broadcast over rows, v [d]
    Var mul_row(Var x, Var vv) {
        const Tensor<S>& X = val(x);
        const Tensor<S>& V = val(vv);
        int M = X.dim(0), d = X.dim(1);
        FSC_CHECK(V.dim(0) == d, "mul_row dims");
        Tensor<S> out({M, d});
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < d; ++j) out[int64_t(i) * d + j] = X[int64_t(i) * d + j] * V[j];
        Var o = push(std::move(out), needs(x) || needs(vv));
        if (track(o)) set_back(o, [this, o, x, vv, M, d] {
            const Tensor<S>& g = gref(o);
            if (needs(x)) {
                const Tensor<S>& V2 = val(vv);
                Tensor<S> gx({M, d});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < d; ++j) gx[int64_t(i) * d + j] = g[int64_t(i) * d + j] * V2[j];
                accum_move(x, std::move(gx));
            }
            if (needs(vv)) {
                const Tensor<S>& X2 = val(x);
                Tensor<S> gv({d});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < d; ++j) gv[j] += g[int64_t(i) * d + j] * X2[int64_t(i) * d + j];
                accum_move(vv, std::move(gv));
            }
        });
        return o;
    }

    // ---- linear / matmul ----

    // y = x W^T (+ b), x [M,din] or [din], W [dout,din], b [dout]
    Var linear(Var x, Var w, Var b = Var{}) {
        const Tensor<S>& X = val(x);
        const Tensor<S>& Wt = val(w);
        bool vec = X.ndim() == 1;
        int M = vec ? 1 : X.dim(0);
        int din = vec ? X.dim(0) : X.dim(1);
        int dout = Wt.dim(0);
        FSC_CHECK(Wt.dim(1) == din, "linear dims");
        Tensor<S> out(vec ? std::vector<int>{dout} : std::vector<int>{M, dout});
        gemm<S>(false, true, M, dout, din, S(1), X.data(), Wt.data(), S(0), out.data());
        if (b.ok()) {
            const Tensor<S>& B = val(b);
            FSC_CHECK(B.dim(0) == dout, "linear bias dim");
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < dout; ++j) out[int64_t(i) * dout + j] += B[j];
        }
        Var o = push(std::move(out), needs(x) || needs(w) || (b.ok() && needs(b)));
        if (track(o)) set_back(o, [this, o, x, w, b, M, din, dout] {
            const Tensor<S>& g = gref(o);
            if (needs(x)) {
                Tensor<S> gx = val(x);
                gemm<S>(false, false, M, din, dout, S(1), g.data(), val(w).data(), S(0), gx.data());
                accum_move(x, std::move(gx));
            }
            if (needs(w)) {
                Tensor<S> gw({dout, din});
                gemm<S>(true, false, dout, din, M, S(1), g.data(), val(x).data(), S(0), gw.data());
                accum_move(w, std::move(gw));
            }
            if (b.ok() && needs(b)) {
                Tensor<S> gb({dout});
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < dout; ++j) gb[j] += g[int64_t(i) * dout + j];
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    // ---- conv ----

    // x [C,H,W], w [O,C,kh,kw], b [O]; same-style padding chosen by caller
    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor<S>& X = val(x);
        const Tensor<S>& Wt = val(w);
        int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        int O = Wt.dim(0), kh = Wt.dim(2), kw = Wt.dim(3);
        FSC_CHECK(Wt.dim(1) == C, "conv2d channel mismatch");
        int Ho = (H + 2 * pad - kh) / stride + 1;
        int Wo = (W + 2 * pad - kw) / stride + 1;
        int K = C * kh * kw;
        Tensor<S> col({K, Ho * Wo});
        im2col(X.data(), C, H, W, kh, kw, stride, pad, col.data(), Ho, Wo);
        Tensor<S> out({O, Ho, Wo});
        gemm<S>(false, false, O, Ho * Wo, K, S(1), Wt.data(), col.data(), S(0), out.data());
        if (b.ok()) {
            const Tensor<S>& B = val(b);
            for (int oc = 0; oc < O; ++oc) {
                S bb = B[oc];
                for (int i = 0; i < Ho * Wo; ++i) out[int64_t(oc) * Ho * Wo + i] += bb;
            }
        }
        Var o = push(std::move(out), needs(x) || needs(w) || (b.ok() && needs(b)));
        if (track(o))
            set_back(o, [this, o, x, w, b, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K] {
                const Tensor<S>& g = gref(o);  // [O,Ho,Wo]
                if (needs(w)) {
                    // recompute im2col rather than keep it alive on the tape
                    Tensor<S> col({K, Ho * Wo});
                    im2col(val(x).data(), C, H, W, kh, kw, stride, pad, col.data(), Ho, Wo);
                    Tensor<S> gw({O, C, kh, kw});
                    gemm<S>(false, true, O, K, Ho * Wo, S(1), g.data(), col.data(), S(0), gw.data());
                    accum_move(w, std::move(gw));
                }
                if (b.ok() && needs(b)) {
                    Tensor<S> gb({O});
                    for (int oc = 0; oc < O; ++oc) {
                        S acc = 0;
                        for (int i = 0; i < Ho * Wo; ++i) acc += g[int64_t(oc) * Ho * Wo + i];
                        gb[oc] = acc;
                    }
                    accum_move(b, std::move(gb));
                }
                if (needs(x)) {
                    Tensor<S> gcol({K, Ho * Wo});
                    gemm<S>(true, false, K, Ho * Wo, O, S(1), val(w).data(), g.data(), S(0),
                            gcol.data());
                    Tensor<S> gx({C, H, W});
                    col2im_add(gcol.data(), C, H, W, kh, kw, stride, pad, gx.data(), Ho, Wo);
                    accum_move(x, std::move(gx));
                }
            });
        return o;
    }

    // ---- normalization ----

    // x [C,H,W] in G groups; gamma/beta [C]
    Var group_norm(Var x, Var gamma, Var beta, int G, S eps = S(1e-5)) {
        const Tensor<S>& X = val(x);
        int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        FSC_CHECK(C % G == 0, "group_norm channel/groups");
        int cg = C / G, n = cg * H * W;
        Tensor<S> xhat({C, H, W}), istd({G});
        for (int g = 0; g < G; ++g) {
            const S* xs = X.data() + int64_t(g) * n;
            S mu = 0;
            for (int i = 0; i < n; ++i) mu += xs[i];
            mu /= S(n);
            S var = 0;
            for (int i = 0; i < n; ++i) {
                S d = xs[i] - mu;
                var += d * d;
            }
            var /= S(n);
            S is = S(1) / std::sqrt(var + eps);
            istd[g] = is;
            S* xh = xhat.data() + int64_t(g) * n;
            for (int i = 0; i < n; ++i) xh[i] = (xs[i] - mu) * is;
        }
        const Tensor<S>& Ga = val(gamma);
        const Tensor<S>& Be = val(beta);
        Tensor<S> out({C, H, W});
        for (int c = 0; c < C; ++c) {
            S gsc = Ga[c], bsc = Be[c];
            for (int i = 0; i < H * W; ++i)
                out[int64_t(c) * H * W + i] = xhat[int64_t(c) * H * W + i] * gsc + bsc;
        }
        Var o = push(std::move(out), needs(x) || needs(gamma) || needs(beta));
        if (track(o)) {
            int oid = o.id;
            nodes_[size_t(oid)].aux.push_back(std::move(xhat));
            nodes_[size_t(oid)].aux.push_back(std::move(istd));
            set_back(o, [this, o, x, gamma, beta, C, H, W, G, cg] {
                const Tensor<S>& g = gref(o);
                const Tensor<S>& xh = nodes_[size_t(o.id)].aux[0];
                const Tensor<S>& is = nodes_[size_t(o.id)].aux[1];
                const Tensor<S>& Ga2 = val(gamma);
                int HW = H * W, n = cg * HW;
                if (needs(gamma)) {
                    Tensor<S> gg({C});
                    for (int c = 0; c < C; ++c) {
                        S acc = 0;
                        for (int i = 0; i < HW; ++i)
                            acc += g[int64_t(c) * HW + i] * xh[int64_t(c) * HW + i];
                        gg[c] = acc;
                    }
                    accum_move(gamma, std::move(gg));
                }
                if (needs(beta)) {
                    Tensor<S> gb({C});
                    for (int c = 0; c < C; ++c) {
                        S acc = 0;
                        for (int i = 0; i < HW; ++i) acc += g[int64_t(c) * HW + i];
                        gb[c] = acc;
                    }
                    accum_move(beta, std::move(gb));
                }
                if (needs(x)) {
                    Tensor<S> gx({C, H, W});
                    for (int grp = 0; grp < G; ++grp) {
                        // dxhat = g * gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        S m1 = 0, m2 = 0;
                        for (int c = grp * cg; c < (grp + 1) * cg; ++c)
                            for (int i = 0; i < HW; ++i) {
                                S dxh = g[int64_t(c) * HW + i] * Ga2[c];
                                m1 += dxh;
                                m2 += dxh * xh[int64_t(c) * HW + i];
                            }
                        m1 /= S(n);
                        m2 /= S(n);
                        for (int c = grp * cg; c < (grp + 1) * cg; ++c)
                            for (int i = 0; i < HW; ++i) {
                                S dxh = g[int64_t(c) * HW + i] * Ga2[c];
                                gx[int64_t(c) * HW + i] =
                                    is[grp] * (dxh - m1 - xh[int64_t(c) * HW + i] * m2);
                            }
                    }
                    accum_move(x, std::move(gx));
                }
            });
        }
        return o;
    }

    // parameter-free LayerNorm over the last axis of [M,d]
    Var layer_norm_rows(Var x, S eps = S(1e-5)) {
        const Tensor<S>& X = val(x);
        int M = X.dim(0), d = X.dim(1);
        Tensor<S> out({M, d}), istd({M});
        for (int i = 0; i < M; ++i) {
            const S* xs = X.data() + int64_t(i) * d;
            S mu = 0;
            for (int j = 0; j < d; ++j) mu += xs[j];
            mu /= S(d);
            S var = 0;
            for (int j = 0; j < d; ++j) {
                S dd = xs[j] - mu;
                var += dd * dd;
            }
            var /= S(d);
            S is = S(1) / std::sqrt(var + eps);
            istd[i] = is;
            for (int j = 0; j < d; ++j) out[int64_t(i) * d + j] = (xs[j] - mu) * is;
        }
        Var o = push(std::move(out), needs(x));
        if (track(o)) {
            nodes_[size_t(o.id)].aux.push_back(std::move(istd));
            set_back(o, [this, o, x, M, d] {
                const Tensor<S>& g = gref(o);
                const Tensor<S>& xh = nodes_[size_t(o.id)].val;  // output == xhat here
                const Tensor<S>& is = nodes_[size_t(o.id)].aux[0];
                Tensor<S> gx({M, d});
                for (int i = 0; i < M; ++i) {
                    S m1 = 0, m2 = 0;
                    for (int j = 0; j < d; ++j) {
                        m1 += g[int64_t(i) * d + j];
                        m2 += g[int64_t(i) * d + j] * xh[int64_t(i) * d + j];
                    }
                    m1 /= S(d);
                    m2 /= S(d);
                    for (int j = 0; j < d; ++j)
                        gx[int64_t(i) * d + j] =
                            is[i] * (g[int64_t(i) * d + j] - m1 - xh[int64_t(i) * d + j] * m2);
                }
                accum_move(x, std::move(gx));
            });
        }
        return o;
    }

    // ---- embeddings ----

    Var embed_row(Var table, int row) {
        const Tensor<S>& T = val(table);
        int R = T.dim(0), d = T.dim(1);
        FSC_CHECK(row >= 0 && row < R, "embed_row range");
        Tensor<S> out({d});
        std::memcpy(out.data(), T.data() + int64_t(row) * d, sizeof(S) * size_t(d));
        Var o = push(std::move(out), needs(table));
        if (track(o)) set_back(o, [this, o, table, row, R, d] {
            const Tensor<S>& g = gref(o);
            Tensor<S> gt({R, d});
            std::memcpy(gt.data() + int64_t(row) * d, g.data(), sizeof(S) * size_t(d));
            accum_move(table, std::move(gt));
        });
        return o;
    }

    // ---- losses ----

    Var mse(Var a, Var b) {
        const Tensor<S>&A = val(a), &B = val(b);
        FSC_CHECK(A.numel() == B.numel(), "mse shape");
        int64_t n = A.numel();
        S acc = 0;
        for (int64_t i = 0; i < n; ++i) {
            S d = A[i] - B[i];
            acc += d * d;
        }
        Var o = push(Tensor<S>::scalar(acc / S(n)), needs(a) || needs(b));
        if (track(o)) set_back(o, [this, o, a, b, n] {
            S g = gref(o)[0] * S(2) / S(n);
            const Tensor<S>&A2 = val(a), &B2 = val(b);
            if (needs(a)) {
                Tensor<S> ga = A2;
                for (int64_t i = 0; i < n; ++i) ga[i] = g * (A2[i] - B2[i]);
                accum_move(a, std::move(ga));
            }
            if (needs(b)) {
                Tensor<S> gb = B2;
                for (int64_t i = 0; i < n; ++i) gb[i] = g * (B2[i] - A2[i]);
                accum_move(b, std::move(gb));
            }
        });
        return o;
    }

    Var average(const std::vector<Var>& xs) {
        FSC_CHECK(!xs.empty(), "average of nothing");
        S acc = 0;
        bool any = false;
        for (Var v : xs) {
            acc += val(v)[0];
            any = any || needs(v);
        }
        Var o = push(Tensor<S>::scalar(acc / S(xs.size())), any);
        if (track(o)) set_back(o, [this, o, xs] {
            S g = gref(o)[0] / S(xs.size());
            for (Var v : xs)
                if (needs(v)) {
                    Tensor<S> gv = Tensor<S>::scalar(g);
                    accum_move(v, std::move(gv));
                }
        });
        return o;
    }

    // ---- fused multi-head attention ----
    //
    // q_in [M,d], k_in/v_in [N,d]; wq/wk/wv [d,d] (head h owns output columns
    // [h*dh,(h+1)*dh)); optional projection biases. Output [M,d] is the
    // concatenation of per-head attention results in those column blocks.
    // Saves projections + per-row softmax stats; probabilities are recomputed
    // head-by-head in backward, never stored (at 32x32 tokens storing them
    // would cost tens of MB per module per step).
    Var mha(Var q_in, Var k_in, Var v_in, Var wq, Var wk, Var wv, Var bq, Var bk, Var bv, int heads,
            std::vector<Tensor<S>>* probs_out = nullptr) {
        const Tensor<S>& Q = val(q_in);
        const Tensor<S>& Kt = val(k_in);
        const Tensor<S>& Vt = val(v_in);
        int M = Q.dim(0), d = Q.dim(1), N = Kt.dim(0);
        FSC_CHECK(Kt.dim(1) == d && Vt.dim(0) == N && Vt.dim(1) == d, "mha dims");
        FSC_CHECK(d % heads == 0, "mha: heads must divide width");
        int dh = d / heads;
        S scl = S(1) / std::sqrt(S(dh));

        Tensor<S> Qp = project(Q, wq, bq, M, d);
        Tensor<S> Kp = project(Kt, wk, bk, N, d);
        Tensor<S> Vp = project(Vt, wv, bv, N, d);

        Tensor<S> out({M, d});
        Tensor<S> stats({2, heads, M});  // [0]=row max, [1]=row sumexp
        Tensor<S> buf({M, N});
        for (int h = 0; h < heads; ++h) {
            // scores for this head: buf = scl * Qp_h Kp_h^T
            gemm_raw(false, true, M, N, dh, scl, Qp.data() + h * dh, d, Kp.data() + h * dh, d, S(0),
                     buf.data(), N);
            for (int i = 0; i < M; ++i) {
                S* row = buf.data() + int64_t(i) * N;
                S mx = row[0];
                for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
                S z = 0;
                for (int j = 0; j < N; ++j) {
                    row[j] = vexp(row[j] - mx);
                    z += row[j];
                }
                S iz = S(1) / z;
                for (int j = 0; j < N; ++j) row[j] *= iz;
                stats[(int64_t(0) * heads + h) * M + i] = mx;
                stats[(int64_t(1) * heads + h) * M + i] = z;
            }
            if (probs_out) probs_out->push_back(buf);
            // out_h = P Vp_h
            gemm_raw(false, false, M, dh, N, S(1), buf.data(), N, Vp.data() + h * dh, d, S(0),
                     out.data() + h * dh, d);
        }

        bool nd = needs(q_in) || needs(k_in) || needs(v_in) || needs(wq) || needs(wk) ||
                  needs(wv) || (bq.ok() && needs(bq)) || (bk.ok() && needs(bk)) ||
                  (bv.ok() && needs(bv));
        Var o = push(std::move(out), nd);
        if (track(o)) {
            Node& node = nodes_[size_t(o.id)];
            node.aux.push_back(std::move(Qp));
            node.aux.push_back(std::move(Kp));
            node.aux.push_back(std::move(Vp));
            node.aux.push_back(std::move(stats));
            set_back(o, [this, o, q_in, k_in, v_in, wq, wk, wv, bq, bk, bv, heads, M, N, d, dh,
                         scl] {
                const Tensor<S>& g = gref(o);  // [M,d]
                const Tensor<S>& Qp = nodes_[size_t(o.id)].aux[0];
                const Tensor<S>& Kp = nodes_[size_t(o.id)].aux[1];
                const Tensor<S>& Vp = nodes_[size_t(o.id)].aux[2];
                const Tensor<S>& st = nodes_[size_t(o.id)].aux[3];
                Tensor<S> dQp({M, d}), dKp({N, d}), dVp({N, d});
                Tensor<S> P({M, N}), dP({M, N});
                for (int h = 0; h < heads; ++h) {
                    // recompute P from stored row stats (same exp as forward)
                    gemm_raw(false, true, M, N, dh, scl, Qp.data() + h * dh, d, Kp.data() + h * dh,
                             d, S(0), P.data(), N);
                    for (int i = 0; i < M; ++i) {
                        S mx = st[(int64_t(0) * heads + h) * M + i];
                        S iz = S(1) / st[(int64_t(1) * heads + h) * M + i];
                        S* row = P.data() + int64_t(i) * N;
                        for (int j = 0; j < N; ++j) row[j] = vexp(row[j] - mx) * iz;
                    }
                    // dVp_h += P^T g_h
                    gemm_raw(true, false, N, dh, M, S(1), P.data(), N, g.data() + h * dh, d, S(1),
                             dVp.data() + h * dh, d);
                    // dP = g_h Vp_h^T
                    gemm_raw(false, true, M, N, dh, S(1), g.data() + h * dh, d, Vp.data() + h * dh,
                             d, S(0), dP.data(), N);
                    // dS = P o (dP - rowsum(dP o P)), scale folded in
                    for (int i = 0; i < M; ++i) {
                        S* pr = P.data() + int64_t(i) * N;
                        S* dpr = dP.data() + int64_t(i) * N;
                        S r = 0;
                        for (int j = 0; j < N; ++j) r += pr[j] * dpr[j];
                        for (int j = 0; j < N; ++j) dpr[j] = pr[j] * (dpr[j] - r) * scl;
                    }
                    // dQp_h += dS Kp_h ; dKp_h += dS^T Qp_h
                    gemm_raw(false, false, M, dh, N, S(1), dP.data(), N, Kp.data() + h * dh, d,
                             S(1), dQp.data() + h * dh, d);
                    gemm_raw(true, false, N, dh, M, S(1), dP.data(), N, Qp.data() + h * dh, d, S(1),
                             dKp.data() + h * dh, d);
                }
                project_back(q_in, wq, bq, dQp, M, d);
                project_back(k_in, wk, bk, dKp, N, d);
                project_back(v_in, wv, bv, dVp, N, d);
            });
        }
        return o;
    }

    // ---- backward driver ----

    // Seeds d(root)=1, walks the tape backwards, then flushes leaf gradients
    // into their Params (accumulating across prior backward calls if any).
    void backward(Var root) {
        FSC_CHECK(grad_enabled_, "backward on a no-grad tape");
        Node& r = nodes_[size_t(root.id)];
        FSC_CHECK(r.val.numel() == 1, "backward root must be scalar");
        if (r.grad.empty()) r.grad = Tensor<S>::scalar(S(1));
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.back && !n.grad.empty() && n.needs) n.back();
        }
        for (auto& [p, id] : param_nodes_) {
            Node& n = nodes_[size_t(id)];
            if (n.grad.empty()) continue;
            if (p->has_grad) {
                taxpy(S(1), n.grad, p->grad);
            } else {
                p->grad = n.grad;
                p->has_grad = true;
            }
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

  private:
    bool needs(Var v) const { return nodes_[size_t(v.id)].needs; }
    bool track(Var o) const { return grad_enabled_ && nodes_[size_t(o.id)].needs; }
    const Tensor<S>& gref(Var v) const { return nodes_[size_t(v.id)].grad; }

    Var push(Tensor<S> v, bool needs_grad) {
        Node n;
        n.val = std::move(v);
        n.needs = needs_grad;
        nodes_.push_back(std::move(n));
        return Var{int(nodes_.size() - 1)};
    }

    void set_back(Var o, std::function<void()> fn) { nodes_[size_t(o.id)].back = std::move(fn); }

    void accum_eq(Var v, const Tensor<S>& g) {
        Node& n = nodes_[size_t(v.id)];
        if (n.grad.empty()) {
            n.grad = g;
        } else {
            taxpy(S(1), g, n.grad);
        }
    }
    void accum_move(Var v, Tensor<S>&& g) {
        Node& n = nodes_[size_t(v.id)];
        if (n.grad.empty()) {
            n.grad = std::move(g);
        } else {
            taxpy(S(1), g, n.grad);
        }
    }

    Tensor<S> project(const Tensor<S>& X, Var w, Var b, int M, int d) {
        Tensor<S> out({M, d});
        gemm<S>(false, true, M, d, d, S(1), X.data(), val(w).data(), S(0), out.data());
        if (b.ok()) {
            const Tensor<S>& B = val(b);
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < d; ++j) out[int64_t(i) * d + j] += B[j];
        }
        return out;
    }

    void project_back(Var x, Var w, Var b, const Tensor<S>& dProj, int M, int d) {
        if (needs(x)) {
            Tensor<S> gx({M, d});
            gemm<S>(false, false, M, d, d, S(1), dProj.data(), val(w).data(), S(0), gx.data());
            accum_move(x, std::move(gx));
        }
        if (needs(w)) {
            Tensor<S> gw({d, d});
            gemm<S>(true, false, d, d, M, S(1), dProj.data(), val(x).data(), S(0), gw.data());
            accum_move(w, std::move(gw));
        }
        if (b.ok() && needs(b)) {
            Tensor<S> gb({d});
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < d; ++j) gb[j] += dProj[int64_t(i) * d + j];
            accum_move(b, std::move(gb));
        }
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::unordered_map<Param<S>*, int> param_nodes_;
};

}  // namespace fsc

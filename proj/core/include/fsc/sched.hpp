#pragma once

// Forward diffusion, ancestral reverse sampling, classifier-free guidance.
// Coefficients are kept in double regardless of the tensor scalar type.
// Timesteps are 1-based (t in 1..T); alpha_bar(0) == 1 by convention.

#include <functional>
#include <vector>

#include "fsc/rng.hpp"
#include "fsc/tensor.hpp"

namespace fsc {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // index t-1
    std::vector<double> alphas;      // 1 - betas
    std::vector<double> alpha_bars;  // cumulative product of alphas

    double beta(int t) const { return betas[size_t(t - 1)]; }
    double alpha(int t) const { return alphas[size_t(t - 1)]; }
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[size_t(t - 1)]; }
};

inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(size_t(T));
    for (int i = 0; i < T; ++i)
        s.betas[size_t(i)] =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
    s.alphas.resize(size_t(T));
    s.alpha_bars.resize(size_t(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alphas[size_t(i)] = 1.0 - s.betas[size_t(i)];
        prod *= s.alphas[size_t(i)];
        s.alpha_bars[size_t(i)] = prod;
    }
    return s;
}

inline void check_timestep(int t, const NoiseSchedule& s, int lo = 1) {
    if (t < lo || t > s.T) throw ConfigError("timestep out of range");
}

// z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps
template <typename S>
Tensor<S> q_sample(const Tensor<S>& z0, const Tensor<S>& eps, int t, const NoiseSchedule& sched) {
    check_timestep(t, sched);
    if (!z0.same_shape(eps)) throw DataError("q_sample: shape mismatch");
    double ab = sched.alpha_bar(t);
    S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
    Tensor<S> out = z0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

// One generalized ancestral step t_hi -> t_lo (t_lo < t_hi). With
// t_lo = t_hi - 1 this is the textbook DDPM posterior-mean update with
// sigma_t = sqrt(beta_t); for larger strides the effective one-step
// coefficients are alpha_eff = ab(t_hi)/ab(t_lo), beta_eff = 1 - alpha_eff.
template <typename S>
Tensor<S> ancestral_step_between(const Tensor<S>& z_hi, const Tensor<S>& eps_hat, int t_hi,
                                 int t_lo, const NoiseSchedule& sched, const Tensor<S>* noise) {
    check_timestep(t_hi, sched);
    if (t_lo < 0 || t_lo >= t_hi) throw ConfigError("ancestral step: need 0 <= t_lo < t_hi");
    if (!z_hi.same_shape(eps_hat)) throw DataError("ancestral step: shape mismatch");
    double ab_hi = sched.alpha_bar(t_hi), ab_lo = sched.alpha_bar(t_lo);
    double alpha_eff = ab_hi / ab_lo;
    double beta_eff = 1.0 - alpha_eff;
    S inv_sqrt_a = S(1.0 / std::sqrt(alpha_eff));
    S coef = S(beta_eff / std::sqrt(1.0 - ab_hi));
    S sigma = S(std::sqrt(beta_eff));
    Tensor<S> out = z_hi;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = inv_sqrt_a * (z_hi[i] - coef * eps_hat[i]);
    if (noise) {
        if (!noise->same_shape(z_hi)) throw DataError("ancestral step: noise shape");
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += sigma * (*noise)[i];
    }
    return out;
}

template <typename S>
Tensor<S> ancestral_step(const Tensor<S>& z_t, const Tensor<S>& eps_hat, int t,
                         const NoiseSchedule& sched, const Tensor<S>& noise) {
    check_timestep(t, sched);
    if (t == 1 && tmax_abs(noise) != S(0))
        throw ConfigError("ancestral_step: noise must be zero at t=1");
    return ancestral_step_between(z_t, eps_hat, t, t - 1, sched, &noise);
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, S scale) {
    if (!eps_uncond.same_shape(eps_cond)) throw DataError("cfg_combine: shape mismatch");
    Tensor<S> out = eps_uncond;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// Evenly spaced integer timesteps, largest first; ties broken toward larger t.
inline std::vector<int> strided_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw ConfigError("strided_timesteps: need 1 <= steps <= T");
    std::vector<int> ts(static_cast<size_t>(steps), 0);
    for (int i = 0; i < steps; ++i)
        ts[size_t(i)] = int(std::ceil(double(T) * double(steps - i) / double(steps)));
    return ts;
}

struct SampleOptions {
    bool clamp_x0 = false;  // clamp the implied z0 to [-1,1] each step
};

// denoise_fn(z_t, t, conditioned) -> eps_hat. With cfg_scale != 1 it is
// called once per step per branch (conditioned=false then true).
template <typename S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>&, int, bool)>;

template <typename S>
Tensor<S> sample_loop(const DenoiseFn<S>& denoise_fn, std::vector<int> shape,
                      const NoiseSchedule& sched, int steps, S cfg_scale, uint64_t seed,
                      SampleOptions opts = {}) {
    std::vector<int> ts = strided_timesteps(sched.T, steps);
    Rng rng(seed, 0x5a6d7c8e);
    Tensor<S> z(shape);
    z.fill_normal(rng);
    for (size_t i = 0; i < ts.size(); ++i) {
        int t_hi = ts[i];
        int t_lo = (i + 1 < ts.size()) ? ts[i + 1] : 0;
        Tensor<S> eps_hat;
        if (cfg_scale == S(1)) {
            eps_hat = denoise_fn(z, t_hi, true);
        } else {
            Tensor<S> eps_u = denoise_fn(z, t_hi, false);
            Tensor<S> eps_c = denoise_fn(z, t_hi, true);
            eps_hat = cfg_combine(eps_u, eps_c, cfg_scale);
        }
        if (!eps_hat.same_shape(z)) throw DataError("sample_loop: denoise_fn shape mismatch");
        if (opts.clamp_x0) {
            // re-derive eps from the clamped x0 estimate
            double ab = sched.alpha_bar(t_hi);
            S sa = S(std::sqrt(ab)), sb = S(std::sqrt(1.0 - ab));
            for (int64_t k = 0; k < z.numel(); ++k) {
                S x0 = (z[k] - sb * eps_hat[k]) / sa;
                x0 = std::min(S(1), std::max(S(-1), x0));
                eps_hat[k] = (z[k] - sa * x0) / sb;
            }
        }
        if (t_lo > 0) {
            Tensor<S> noise(shape);
            noise.fill_normal(rng);
            z = ancestral_step_between(z, eps_hat, t_hi, t_lo, sched, &noise);
        } else {
            z = ancestral_step_between<S>(z, eps_hat, t_hi, 0, sched, nullptr);
        }
    }
    return z;
}

}  // namespace fsc

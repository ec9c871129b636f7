// Diffusion schedule, forward corruption, ancestral sampling, CFG.

#include <doctest.h>

#include <cmath>

#include "fsc/sched.hpp"

using namespace fsc;

TEST_CASE("make_schedule: pinned examples and loop oracle") {
    auto s1 = make_schedule(1, 0.5, 0.9);
    CHECK(s1.betas.size() == 1);
    CHECK(s1.betas[0] == doctest::Approx(0.5));
    CHECK(s1.alpha_bars[0] == doctest::Approx(0.5));

    auto s2 = make_schedule(2, 0.1, 0.2);
    CHECK(s2.alpha_bars[0] == doctest::Approx(0.9));
    CHECK(s2.alpha_bars[1] == doctest::Approx(0.72));

    auto s = make_schedule(200, 1e-4, 0.02);
    CHECK(s.betas.front() == doctest::Approx(1e-4));
    CHECK(s.betas.back() == doctest::Approx(0.02));
    // independent cumulative-product oracle
    double prod = 1.0;
    for (int i = 0; i < 200; ++i) {
        double beta = 1e-4 + (0.02 - 1e-4) * double(i) / 199.0;
        prod *= 1.0 - beta;
        CHECK(s.alpha_bars[size_t(i)] == doctest::Approx(prod).epsilon(1e-12));
        if (i > 0) CHECK(s.alpha_bars[size_t(i)] < s.alpha_bars[size_t(i - 1)]);
    }

    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.5, 1.0), ConfigError);
}

TEST_CASE("schedule invariants hold over random parameters") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        int T = rng.range(1, 500);
        double b0 = rng.uniform(1e-5, 0.1);
        double b1 = b0 + rng.uniform(0.0, 0.4);
        auto s = make_schedule(T, b0, b1);
        for (int t = 1; t <= T; ++t) {
            CHECK(s.beta(t) > 0.0);
            CHECK(s.beta(t) < 1.0);
            CHECK(s.alpha_bar(t) > 0.0);
            CHECK(s.alpha_bar(t) < 1.0);
            CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }
}

TEST_CASE("q_sample: closed form, linearity, Monte-Carlo oracle") {
    auto s = make_schedule(2, 0.1, 0.2);  // alpha_bar(2) = 0.72
    Rng rng(7);
    Tensor<float> z0({1, 4, 4});
    z0.fill_normal(rng);
    Tensor<float> zero = Tensor<float>::zeros({1, 4, 4});

    auto zt = q_sample(z0, zero, 2, s);
    for (int64_t i = 0; i < zt.numel(); ++i)
        CHECK(zt[i] == doctest::Approx(std::sqrt(0.72) * z0[i]).epsilon(1e-6));

    Tensor<float> eps({1, 4, 4});
    eps.fill_normal(rng);
    auto ze = q_sample(zero, eps, 2, s);
    for (int64_t i = 0; i < ze.numel(); ++i)
        CHECK(ze[i] == doctest::Approx(std::sqrt(1.0 - 0.72) * eps[i]).epsilon(1e-6));

    // superposition: q(a+b, e1+e2) = q(a,e1) + q(b,e2)
    Tensor<float> z0b({1, 4, 4}), epsb({1, 4, 4});
    z0b.fill_normal(rng);
    epsb.fill_normal(rng);
    Tensor<float> zsum = z0, esum = eps;
    taxpy(1.0f, z0b, zsum);
    taxpy(1.0f, epsb, esum);
    auto lhs = q_sample(zsum, esum, 2, s);
    auto r1 = q_sample(z0, eps, 2, s), r2 = q_sample(z0b, epsb, 2, s);
    taxpy(1.0f, r2, r1);
    CHECK(tmax_abs_diff(lhs, r1) < 1e-6f);

    CHECK_THROWS_AS(q_sample(z0, zero, 0, s), ConfigError);
    CHECK_THROWS_AS(q_sample(z0, zero, 3, s), ConfigError);
    CHECK_THROWS_AS(q_sample(z0, Tensor<float>::zeros({1, 2, 2}), 1, s), DataError);

    // closed form vs iterated one-step corruption, in distribution
    auto s5 = make_schedule(5, 0.05, 0.3);
    const int n = 100000;
    Rng mc(123);
    double m_closed = 0, v_closed = 0, m_iter = 0, v_iter = 0;
    const double x0 = 0.8;
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
        Tensor<double> z({1, 1, 1});
        z[0] = x0;
        Tensor<double> e({1, 1, 1});
        e[0] = mc.normal();
        a[size_t(i)] = q_sample(z, e, 5, s5)[0];
        double zi = x0;
        for (int t = 1; t <= 5; ++t)
            zi = std::sqrt(1.0 - s5.beta(t)) * zi + std::sqrt(s5.beta(t)) * mc.normal();
        b[size_t(i)] = zi;
    }
    for (int i = 0; i < n; ++i) {
        m_closed += a[size_t(i)];
        m_iter += b[size_t(i)];
    }
    m_closed /= n;
    m_iter /= n;
    for (int i = 0; i < n; ++i) {
        v_closed += (a[size_t(i)] - m_closed) * (a[size_t(i)] - m_closed);
        v_iter += (b[size_t(i)] - m_iter) * (b[size_t(i)] - m_iter);
    }
    v_closed /= n;
    v_iter /= n;
    double ab5 = s5.alpha_bar(5);
    CHECK(std::abs(m_closed - std::sqrt(ab5) * x0) < 0.02);
    CHECK(std::abs(m_iter - std::sqrt(ab5) * x0) < 0.02);
    CHECK(std::abs(v_closed - (1.0 - ab5)) / (1.0 - ab5) < 0.02);
    CHECK(std::abs(v_iter - (1.0 - ab5)) / (1.0 - ab5) < 0.02);
}

TEST_CASE("ancestral_step: inversion at t=1, limits, determinism") {
    auto s = make_schedule(1, 0.3, 0.3);
    Rng rng(9);
    Tensor<double> z0({2, 3, 3}), eps({2, 3, 3});
    z0.fill_normal(rng);
    eps.fill_normal(rng);
    auto z1 = q_sample(z0, eps, 1, s);
    auto rec = ancestral_step(z1, eps, 1, s, Tensor<double>::zeros({2, 3, 3}));
    for (int64_t i = 0; i < rec.numel(); ++i)
        CHECK(rec[i] == doctest::Approx(z0[i]).epsilon(1e-5));

    // beta -> 0: step approaches identity
    auto stiny = make_schedule(3, 1e-12, 1e-12);
    Tensor<double> zt({1, 2, 2});
    zt.fill_normal(rng);
    Tensor<double> eh0({1, 2, 2});
    eh0.fill_normal(rng);
    auto out = ancestral_step(zt, eh0, 2, stiny, Tensor<double>::zeros({1, 2, 2}));
    CHECK(tmax_abs_diff(out, zt) < 1e-5);

    // determinism
    auto s200 = make_schedule(200, 1e-4, 0.02);
    Tensor<double> noise({1, 2, 2});
    noise.fill_normal(rng);
    Tensor<double> zt2({1, 2, 2}), eh({1, 2, 2});
    zt2.fill_normal(rng);
    eh.fill_normal(rng);
    auto o1 = ancestral_step(zt2, eh, 57, s200, noise);
    auto o2 = ancestral_step(zt2, eh, 57, s200, noise);
    CHECK(tmax_abs_diff(o1, o2) == 0.0);

    CHECK_THROWS_AS(ancestral_step(zt2, eh, 0, s200, noise), ConfigError);
    CHECK_THROWS_AS(ancestral_step(zt2, eh, 201, s200, noise), ConfigError);
    Tensor<double> nz({1, 2, 2});
    nz.fill_normal(rng);
    CHECK_THROWS_AS(ancestral_step(zt2, eh, 1, s200, nz), ConfigError);
}

TEST_CASE("cfg_combine: pinned values and affine shift identity") {
    Tensor<float> u = Tensor<float>::zeros({4});
    Tensor<float> c = Tensor<float>::full({4}, 1.0f);
    auto at1 = cfg_combine(u, c, 1.0f);
    CHECK(tmax_abs_diff(at1, c) == 0.0f);
    auto at0 = cfg_combine(u, c, 0.0f);
    CHECK(tmax_abs_diff(at0, u) == 0.0f);
    auto at75 = cfg_combine(u, c, 7.5f);
    for (int i = 0; i < 4; ++i) CHECK(at75[i] == doctest::Approx(7.5f));

    // affine in scale
    Rng rng(3);
    Tensor<float> ru({8}), rc({8});
    ru.fill_normal(rng);
    rc.fill_normal(rng);
    auto s2 = cfg_combine(ru, rc, 2.0f);
    auto s3 = cfg_combine(ru, rc, 3.0f);
    auto s4 = cfg_combine(ru, rc, 4.0f);
    for (int i = 0; i < 8; ++i)
        CHECK(s4[i] - s3[i] == doctest::Approx(s3[i] - s2[i]).epsilon(1e-4));

    // adding a constant to both branches shifts the output by that constant,
    // so any argmax over candidates is unchanged
    Tensor<float> us = ru, cs = rc;
    for (int i = 0; i < 8; ++i) {
        us[i] += 0.25f;
        cs[i] += 0.25f;
    }
    auto shifted = cfg_combine(us, cs, 7.5f);
    auto base = cfg_combine(ru, rc, 7.5f);
    for (int i = 0; i < 8; ++i) CHECK(shifted[i] == doctest::Approx(base[i] + 0.25f).epsilon(1e-4));

    CHECK_THROWS_AS(cfg_combine(ru, Tensor<float>::zeros({4}), 1.0f), DataError);
}

TEST_CASE("strided timesteps: spacing, ordering, tie-breaking") {
    auto full = strided_timesteps(7, 7);
    CHECK(full == std::vector<int>{7, 6, 5, 4, 3, 2, 1});
    auto s50 = strided_timesteps(200, 50);
    CHECK(s50.size() == 50);
    CHECK(s50.front() == 200);
    CHECK(s50.back() == 4);
    for (size_t i = 1; i < s50.size(); ++i) CHECK(s50[i] == s50[i - 1] - 4);
    // ties toward larger t
    auto odd = strided_timesteps(5, 2);
    CHECK(odd == std::vector<int>{5, 3});
    for (int T : {1, 3, 17, 200})
        for (int S = 1; S <= T; S = S * 2 + 1) {
            auto ts = strided_timesteps(T, S);
            CHECK(int(ts.size()) == S);
            CHECK(ts.front() == T);
            for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
            for (int t : ts) {
                CHECK(t >= 1);
                CHECK(t <= T);
            }
        }
    CHECK_THROWS_AS(strided_timesteps(10, 11), ConfigError);
    CHECK_THROWS_AS(strided_timesteps(10, 0), ConfigError);
}

TEST_CASE("sample_loop: perfect-denoiser inversion, determinism, call counts") {
    auto s1 = make_schedule(1, 0.3, 0.3);
    Rng rng(21);
    Tensor<float> z0({1, 3, 3});
    z0.fill_normal(rng);
    // the denoiser reports the eps that would have produced the observed z_1
    int calls = 0;
    DenoiseFn<float> fn = [&](const Tensor<float>& z, int t, bool) {
        ++calls;
        CHECK(t == 1);
        Tensor<float> eps = z;
        double ab = s1.alpha_bar(1);
        for (int64_t i = 0; i < z.numel(); ++i)
            eps[i] = float((z[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab));
        return eps;
    };
    auto out = sample_loop(fn, {1, 3, 3}, s1, 1, 1.0f, 77);
    CHECK(calls == 1);
    CHECK(tmax_abs_diff(out, z0) < 1e-4f);

    // determinism + call counting on a longer schedule
    auto s20 = make_schedule(20, 1e-3, 0.05);
    int n_calls = 0;
    DenoiseFn<float> zero_fn = [&](const Tensor<float>& z, int, bool) {
        ++n_calls;
        return Tensor<float>::zeros(z.shape);
    };
    auto a = sample_loop(zero_fn, {1, 2, 2}, s20, 10, 1.0f, 5);
    CHECK(n_calls == 10);
    n_calls = 0;
    auto b = sample_loop(zero_fn, {1, 2, 2}, s20, 10, 1.0f, 5);
    CHECK(tmax_abs_diff(a, b) == 0.0f);
    n_calls = 0;
    (void)sample_loop(zero_fn, {1, 2, 2}, s20, 10, 7.5f, 5);
    CHECK(n_calls == 20);

    CHECK_THROWS_AS(sample_loop(zero_fn, {1, 2, 2}, s20, 21, 1.0f, 5), ConfigError);

    // clamped-x0 variant stays finite and deterministic
    SampleOptions opts;
    opts.clamp_x0 = true;
    auto c1 = sample_loop(zero_fn, {1, 2, 2}, s20, 10, 7.5f, 9, opts);
    auto c2 = sample_loop(zero_fn, {1, 2, 2}, s20, 10, 7.5f, 9, opts);
    CHECK(tmax_abs_diff(c1, c2) == 0.0f);
    for (int64_t i = 0; i < c1.numel(); ++i) CHECK(std::isfinite(c1[i]));
}

#include <doctest.h>

#include <cmath>
#include <set>

#include "fsc/backbone.hpp"
#include "helpers.hpp"

using namespace fsc;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.time_embed_dim = 8;
    cfg.cond_embed_dim = 6;
    cfg.image_size = 8;
    cfg.attn_heads = 2;
    cfg.descriptor_rows = 4;
    return cfg;
}

template <typename S>
Tensor<S> random_image(const BackboneConfig& cfg, Rng& rng) {
    Tensor<S> x({cfg.in_channels, cfg.image_size, cfg.image_size});
    x.fill_uniform(rng, S(-1), S(1));
    return x;
}

}  // namespace

TEST_CASE("timestep embedding: pinned values, t=0 pattern, distinctness") {
    // dim=4, t=1: frequencies 1 and 10000^-(1/2) -> [sin 1, sin .01, cos 1, cos .01]
    Tensor<double> e = timestep_embedding<double>(1, 4);
    CHECK(e[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    CHECK(e[1] == doctest::Approx(std::sin(0.01)).epsilon(1e-12));
    CHECK(e[2] == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(e[3] == doctest::Approx(std::cos(0.01)).epsilon(1e-12));

    // t=0: sine half exactly zero, cosine half exactly one
    Tensor<float> z = timestep_embedding<float>(0, 128);
    for (int i = 0; i < 64; ++i) {
        CHECK(z[i] == 0.0f);
        CHECK(z[64 + i] == 1.0f);
    }

    // all timesteps 0..200 pairwise distinct by more than 1e-6 in max norm
    const int T = 200, dim = 128;
    std::vector<Tensor<float>> embs;
    for (int t = 0; t <= T; ++t) embs.push_back(timestep_embedding<float>(t, dim));
    for (int a = 0; a <= T; ++a)
        for (int b = a + 1; b <= T; ++b) {
            float linf = 0;
            for (int i = 0; i < dim; ++i) linf = std::max(linf, std::abs(embs[a][i] - embs[b][i]));
            CHECK(linf > 1e-6f);
        }

    CHECK_THROWS_AS(timestep_embedding<float>(1, 7), ConfigError);
    CHECK_THROWS_AS(timestep_embedding<float>(1, 0), ConfigError);
}

TEST_CASE("backbone config validation") {
    BackboneConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    BackboneConfig bad = cfg;
    bad.image_size = 30;  // not divisible by 2^2
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.time_embed_dim = 127;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.channel_multipliers = {};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.attn_heads = 3;  // does not divide 128
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.base_channels = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("encoder feature shapes and output shape at the default preset") {
    BackboneConfig cfg;  // base 32, multipliers [1,2,4], image 32
    Rng rng(7, 1);
    Backbone<float> net;
    net.init(cfg, rng);

    Rng drng(8, 1);
    Tensor<float> x = random_image<float>(cfg, drng);
    Tape<float> tape(false);
    Var xv = tape.input(x);
    Var emb = net.embed(tape, 10, 3);
    std::vector<Var> feats = net.encode(tape, xv, emb);

    REQUIRE(feats.size() == 4);  // L+1 with L=3
    CHECK(tape.val(feats[0]).shape == std::vector<int>{32, 32, 32});
    CHECK(tape.val(feats[1]).shape == std::vector<int>{64, 16, 16});
    CHECK(tape.val(feats[2]).shape == std::vector<int>{128, 8, 8});
    CHECK(tape.val(feats[3]).shape == std::vector<int>{128, 8, 8});

    Var out = net.forward(tape, xv, 10, 3);
    CHECK(tape.val(out).shape == x.shape);

    // wrong input shape is a data error naming the expectation
    Tensor<float> badx({3, 16, 16});
    Var bv = tape.input(badx);
    CHECK_THROWS_AS(net.forward(tape, bv, 10, 3), DataError);
    CHECK_THROWS_AS(net.embed(tape, 10, 99), DataError);
}

TEST_CASE("fresh model predicts exactly zero") {
    BackboneConfig cfg = tiny_config();
    Rng rng(11, 0);
    Backbone<float> net;
    net.init(cfg, rng);

    Rng drng(12, 0);
    Tensor<float> x = random_image<float>(cfg, drng);
    Tape<float> tape(false);
    Var out = net.forward(tape, tape.input(x), 5, 1);
    for (int64_t i = 0; i < tape.val(out).numel(); ++i) CHECK(tape.val(out)[i] == 0.0f);
}

TEST_CASE("absent tap, identity tap and zero-additive tap are bit-identical") {
    BackboneConfig cfg = tiny_config();
    Rng rng(21, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    // randomize the zero-initialized head so equality is non-trivial
    Rng hrng(22, 0);
    net.head.w.value.fill_normal(hrng, 0.1f);
    net.head.b.value.fill_normal(hrng, 0.1f);

    Rng drng(23, 0);
    Tensor<float> x = random_image<float>(cfg, drng);

    auto run = [&](const LevelTap<float>* tap) {
        Tape<float> tape(false);
        return tape.val(net.forward(tape, tape.input(x), 3, 2, tap)).v;
    };

    std::vector<float> base = run(nullptr);

    LevelTap<float> identity = [](int, Var e) { return e; };
    CHECK(run(&identity) == base);

    // adding an all-zero map must not change a single bit
    Tape<float>* cur = nullptr;
    LevelTap<float> zero_add = [&cur](int, Var e) {
        Tensor<float> z(cur->val(e).shape);
        return cur->add(e, cur->input(std::move(z)));
    };
    {
        Tape<float> tape(false);
        cur = &tape;
        std::vector<float> got = tape.val(net.forward(tape, tape.input(x), 3, 2, &zero_add)).v;
        CHECK(got == base);
    }

    // a tap that changes the shape is rejected, naming the level
    LevelTap<float> bad = [&cur](int l, Var e) {
        if (l != 1) return e;
        Tensor<float> w({1, 1, 1});
        return cur->input(std::move(w));
    };
    {
        Tape<float> tape(false);
        cur = &tape;
        CHECK_THROWS_WITH_AS(net.forward(tape, tape.input(x), 3, 2, &bad),
                             doctest::Contains("level 1"), DataError);
    }
}

TEST_CASE("runs are independent: repeated forwards match fresh forwards") {
    BackboneConfig cfg = tiny_config();
    Rng rng(31, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    net.head.w.value.fill_normal(rng, 0.1f);

    Rng drng(32, 0);
    Tensor<float> x1 = random_image<float>(cfg, drng);
    Tensor<float> x2 = random_image<float>(cfg, drng);

    std::vector<float> fresh;
    {
        Tape<float> tape(false);
        fresh = tape.val(net.forward(tape, tape.input(x2), 4, 1)).v;
    }
    {
        Tape<float> tape(false);
        (void)net.forward(tape, tape.input(x1), 9, 3);
        std::vector<float> again = tape.val(net.forward(tape, tape.input(x2), 4, 1)).v;
        CHECK(again == fresh);
    }
}

TEST_CASE("no-grad forward leaves parameters without gradients") {
    BackboneConfig cfg = tiny_config();
    Rng rng(41, 0);
    Backbone<float> net;
    net.init(cfg, rng);

    Rng drng(42, 0);
    Tensor<float> x = random_image<float>(cfg, drng);
    Tape<float> tape(false);
    (void)net.forward(tape, tape.input(x), 2, 1);
    net.visit([](Param<float>& p) { CHECK(!p.has_grad); });
}

TEST_CASE("backbone gradients match finite differences") {
    BackboneConfig cfg = tiny_config();
    Rng rng(51, 0);
    Backbone<double> net;
    net.init(cfg, rng);
    // exercise the head path too
    Rng hrng(52, 0);
    net.head.w.value.fill_normal(hrng, 0.05);
    net.head.b.value.fill_normal(hrng, 0.05);

    Rng drng(53, 0);
    Tensor<double> x = random_image<double>(cfg, drng);
    Tensor<double> target({cfg.in_channels, cfg.image_size, cfg.image_size});
    target.fill_uniform(drng, -1.0, 1.0);

    std::vector<Param<double>*> params;
    net.visit([&](Param<double>& p) { params.push_back(&p); });

    fsc::testing::gradcheck(
        params,
        [&](Tape<double>& t) {
            Var out = net.forward(t, t.input(x), 3, 2);
            return t.mse(out, t.input(target));
        },
        1e-5, 1e-4);
}

TEST_CASE("parameter counts are stable") {
    Rng rng(61, 0);

    BackboneConfig cfg;  // default preset: base 32, [1,2,4], d_t 128
    Backbone<float> net;
    net.init(cfg, rng);
    CHECK(net.param_count() == 1633539);
    CHECK(net.enc.param_count() == 806368);

    BackboneConfig small = cfg;
    small.base_channels = 16;
    Backbone<float> net16;
    net16.init(small, rng);
    CHECK(net16.param_count() == 485187);
    CHECK(net16.enc.param_count() == 225264);
}

TEST_CASE("bias sites are assigned consecutively over biases and norm shifts") {
    BackboneConfig cfg = tiny_config();
    Rng rng(71, 0);
    EncoderStack<float> enc;
    enc.init("enc", cfg, rng);

    auto sites = enc.assign_bias_sites();
    REQUIRE(!sites.empty());
    std::set<std::string> names;
    for (int i = 0; i < int(sites.size()); ++i) {
        CHECK(sites[size_t(i)]->bias_site == i);
        CHECK(sites[size_t(i)]->value.ndim() == 1);
        names.insert(sites[size_t(i)]->name);
        size_t dot = sites[size_t(i)]->name.rfind('.');
        std::string leaf = sites[size_t(i)]->name.substr(dot + 1);
        bool ok = leaf == "b" || leaf == "bq" || leaf == "bk" || leaf == "bv" || leaf == "shift";
        CHECK(ok);
    }
    CHECK(names.size() == sites.size());

    // weights and norm scales are never sites
    enc.visit([&](Param<float>& p) {
        size_t dot = p.name.rfind('.');
        std::string leaf = p.name.substr(dot + 1);
        if (leaf == "w" || leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "scale")
            CHECK(p.bias_site == -1);
    });

    // every conv/linear bias and every norm shift is a site
    int expect = 0;
    enc.visit([&](Param<float>& p) {
        size_t dot = p.name.rfind('.');
        std::string leaf = p.name.substr(dot + 1);
        if (leaf == "b" || leaf == "bq" || leaf == "bk" || leaf == "bv" || leaf == "shift")
            ++expect;
    });
    CHECK(int(sites.size()) == expect);
}

#include <doctest.h>

#include "fsc/encoders.hpp"
#include "helpers.hpp"

using namespace fsc;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.in_channels = 3;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.time_embed_dim = 8;
    cfg.cond_embed_dim = 6;
    cfg.image_size = 8;
    cfg.attn_heads = 2;
    return cfg;
}

template <typename S>
Tensor<S> random_image(int ch, int size, Rng& rng) {
    Tensor<S> x({ch, size, size});
    x.fill_uniform(rng, S(-1), S(1));
    return x;
}

template <typename S>
std::vector<S> flat_tokens(EncoderPair<S>& pair, const Tensor<S>& y, const std::string& task) {
    PatchGrid<S> grid = pair.encode_condition_patches(y, task);
    std::vector<S> out;
    for (const auto& lvl : grid.levels) out.insert(out.end(), lvl.v.begin(), lvl.v.end());
    return out;
}

}  // namespace

TEST_CASE("clones reproduce the backbone encoder and stay independent") {
    BackboneConfig cfg = tiny_config();
    Rng rng(101, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    EncoderPair<float> pair = clone_encoders(net, 0.2);

    Rng drng(102, 0);
    Tensor<float> x = random_image<float>(3, cfg.image_size, drng);

    // f(x) equals the backbone encoder at time 0 with the null descriptor
    std::vector<std::vector<float>> direct;
    {
        Tape<float> t(false);
        Var emb = net.embed(t, 0, 0);
        for (Var v : net.encode(t, t.input(x), emb)) direct.push_back(t.val(t.flatten_hw(v)).v);
    }
    PatchGrid<float> grid = pair.encode_image_patches(x);
    REQUIRE(grid.levels.size() == direct.size());
    for (size_t l = 0; l < direct.size(); ++l) CHECK(grid.levels[l].v == direct[l]);

    // mutating g's shared weights leaves f outputs unchanged
    pair.cond_enc.stem.w.value.v[0] += 1.0f;
    PatchGrid<float> again = pair.encode_image_patches(x);
    for (size_t l = 0; l < direct.size(); ++l) CHECK(again.levels[l].v == direct[l]);

    // f parameter count matches the backbone's encoder trunk
    ParamStore<float> store;
    pair.collect_into(store);
    CHECK(store.count("image_encoder") == net.enc.param_count());
    CHECK(store.count("image_encoder") + store.count("cond_shared") + pair.site_count() ==
          2 * net.enc.param_count());

    // frozen / trainable flags
    for (Param<float>* p : store.partition("image_encoder")) CHECK(!p->trainable);
    for (Param<float>* p : store.partition("cond_shared")) CHECK(p->trainable);
    pair.cond_enc.visit([](Param<float>& p) {
        if (p.bias_site >= 0) CHECK(!p.trainable);
    });
}

TEST_CASE("task registration: template fallback, mean init, duplicates") {
    BackboneConfig cfg = tiny_config();
    Rng rng(111, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    EncoderPair<float> pair = clone_encoders(net, 0.2);

    TaskBiasSet<float>& edge = pair.register_task("edge");
    REQUIRE(edge.biases.size() == pair.cond_sites.size());
    for (size_t i = 0; i < edge.biases.size(); ++i) {
        CHECK(edge.biases[i].value.shape == pair.cond_sites[i]->value.shape);
        CHECK(edge.biases[i].value.v == pair.image_sites[i]->value.v);  // template fallback
        CHECK(edge.biases[i].trainable);
        CHECK(edge.biases[i].bias_site == int(i));
    }

    CHECK_THROWS_AS(pair.register_task("edge"), ConfigError);
    CHECK_THROWS_AS(pair.register_task(""), ConfigError);

    // give the first two tasks distinct values, then check the mean init
    for (auto& b : edge.biases)
        for (auto& v : b.value.v) v += 0.25f;
    TaskBiasSet<float>& seg = pair.register_task("seg");
    for (auto& b : seg.biases)
        for (auto& v : b.value.v) v -= 0.75f;
    TaskBiasSet<float>& blob = pair.register_task("blob");
    for (size_t i = 0; i < blob.biases.size(); ++i)
        for (int64_t j = 0; j < blob.biases[i].value.numel(); ++j) {
            float want = (edge.biases[i].value[j] + seg.biases[i].value[j]) * 0.5f;
            CHECK(blob.biases[i].value[j] == want);
        }

    ParamStore<float> store;
    pair.collect_into(store);
    CHECK(store.count("task_bias/edge") == pair.site_count());
    CHECK(store.count("task_bias/seg") == pair.site_count());
    CHECK(store.count("task_bias/blob") == pair.site_count());
}

TEST_CASE("condition encoding: task bias application and isolation") {
    BackboneConfig cfg = tiny_config();
    Rng rng(121, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    EncoderPair<float> pair = clone_encoders(net, 0.2);
    pair.register_task("a");
    pair.register_task("b");  // mean of {a} = same template values

    Rng drng(122, 0);
    Tensor<float> y = random_image<float>(3, cfg.image_size, drng);

    // identical bias values -> identical outputs; equal to the frozen encoder
    // since shared weights still match the clone source
    std::vector<float> ya = flat_tokens(pair, y, "a");
    CHECK(flat_tokens(pair, y, "b") == ya);
    std::vector<float> fx;
    {
        PatchGrid<float> g = pair.encode_image_patches(y);
        for (const auto& lvl : g.levels) fx.insert(fx.end(), lvl.v.begin(), lvl.v.end());
    }
    CHECK(ya == fx);

    // determinism
    CHECK(flat_tokens(pair, y, "a") == ya);

    // perturbing task b changes only task b
    pair.task_bias.at("b").biases[0].value.v[0] += 0.5f;
    CHECK(flat_tokens(pair, y, "a") == ya);
    CHECK(flat_tokens(pair, y, "b") != ya);

    // errors: unregistered task, wrong shape
    CHECK_THROWS_AS(pair.encode_condition_patches(y, "nope"), ConfigError);
    Tensor<float> bad({1, cfg.image_size, cfg.image_size});
    CHECK_THROWS_AS(pair.encode_condition_patches(bad, "a"), DataError);
    CHECK_THROWS_AS(pair.encode_image_patches(bad), DataError);
}

TEST_CASE("token grid sizes at the default preset") {
    BackboneConfig cfg;  // 32x32, [1,2,4]
    Rng rng(131, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    EncoderPair<float> pair = clone_encoders(net);
    pair.register_task("edge");

    Rng drng(132, 0);
    Tensor<float> y = random_image<float>(3, 32, drng);
    PatchGrid<float> grid = pair.encode_condition_patches(y, "edge");
    REQUIRE(grid.levels.size() == 4);
    CHECK(grid.levels[0].shape == std::vector<int>{1024, 32});
    CHECK(grid.levels[1].shape == std::vector<int>{256, 64});
    CHECK(grid.levels[2].shape == std::vector<int>{64, 128});
    CHECK(grid.levels[3].shape == std::vector<int>{64, 128});

    // bias budget at the shipped preset: reported and under the default cap
    CHECK(pair.bias_fraction() > 0.0);
    CHECK(pair.bias_fraction() <= 0.05);
}

TEST_CASE("bias budget cap is enforced") {
    BackboneConfig cfg = tiny_config();
    Rng rng(141, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    CHECK_THROWS_AS(clone_encoders(net, 1e-5), ConfigError);
}

TEST_CASE("gradients reach g and task biases but never f") {
    BackboneConfig cfg = tiny_config();
    Rng rng(151, 0);
    Backbone<float> net;
    net.init(cfg, rng);
    EncoderPair<float> pair = clone_encoders(net, 0.2);
    pair.register_task("edge");

    Rng drng(152, 0);
    Tensor<float> y = random_image<float>(3, cfg.image_size, drng);

    Tape<float> t(true);
    std::vector<Var> cond = pair.encode_condition(t, t.input(y), "edge");
    std::vector<Var> img = pair.encode_image(t, t.input(y));
    Tensor<float> zero0(t.val(cond[0]).shape);
    Tensor<float> zero1(t.val(img[0]).shape);
    Var loss = t.add(t.mse(cond[0], t.input(zero0)), t.mse(img[0], t.input(zero1)));
    t.backward(loss);

    pair.image_enc.visit([](Param<float>& p) { CHECK(!p.has_grad); });
    int shared_with_grad = 0;
    pair.cond_enc.visit([&](Param<float>& p) {
        if (p.bias_site >= 0) CHECK(!p.has_grad);
        if (p.bias_site < 0 && p.has_grad) ++shared_with_grad;
    });
    CHECK(shared_with_grad > 0);
    int bias_with_grad = 0;
    for (auto& b : pair.task_bias.at("edge").biases)
        if (b.has_grad) ++bias_with_grad;
    CHECK(bias_with_grad > 0);
    // stem bias certainly participates
    CHECK(pair.task_bias.at("edge").biases[0].has_grad);
}

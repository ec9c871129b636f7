#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "fsc/io.hpp"
#include "fsc/tasks.hpp"

using namespace fsc;

namespace {

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

SceneSpec one_shape(int kind, double cx, double cy, double size) {
    SceneSpec spec;
    SceneShape s;
    s.kind = kind;
    s.cx = cx;
    s.cy = cy;
    s.size = size;
    s.color[0] = 0.9f;
    s.color[1] = 0.7f;
    s.color[2] = 0.2f;
    spec.shapes.push_back(s);
    for (int c = 0; c < 3; ++c) {
        spec.bg_a[c] = 0.05f;
        spec.bg_b[c] = 0.05f;
    }
    return spec;
}

int count_class(const Tensor<float>& seg, int channel) {
    int S = seg.dim(1);
    int n = 0;
    for (int64_t i = 0; i < int64_t(S) * S; ++i)
        if (seg[int64_t(channel) * S * S + i] == 1.0f) ++n;
    return n;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
    auto [img_a, spec_a] = generate_scene(1234, 32);
    auto [img_b, spec_b] = generate_scene(1234, 32);
    CHECK(same_bits(img_a, img_b));
    REQUIRE(spec_a.shapes.size() == spec_b.shapes.size());
    for (size_t i = 0; i < spec_a.shapes.size(); ++i) {
        CHECK(spec_a.shapes[i].kind == spec_b.shapes[i].kind);
        CHECK(spec_a.shapes[i].cx == spec_b.shapes[i].cx);
        CHECK(spec_a.shapes[i].cy == spec_b.shapes[i].cy);
        CHECK(spec_a.shapes[i].size == spec_b.shapes[i].size);
        CHECK(spec_a.shapes[i].z == spec_b.shapes[i].z);
    }
    auto [img_c, spec_c] = generate_scene(1235, 32);
    CHECK_FALSE(same_bits(img_a, img_c));
}

TEST_CASE("scene census: counts, kinds, invariants") {
    int count_freq[5] = {0, 0, 0, 0, 0};
    int kind_freq[3] = {0, 0, 0};
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        SceneSpec spec = sample_scene(seed);
        REQUIRE(spec.shapes.size() >= 1);
        REQUIRE(spec.shapes.size() <= 4);
        ++count_freq[spec.shapes.size()];
        std::set<int> zs;
        for (const auto& s : spec.shapes) {
            ++kind_freq[s.kind];
            zs.insert(s.z);
            // fully inside the canvas with an anti-aliasing margin to spare
            CHECK(s.cx - 0.5 * s.size >= 0.02);
            CHECK(s.cx + 0.5 * s.size <= 0.98);
            CHECK(s.cy - 0.5 * s.size >= 0.02);
            CHECK(s.cy + 0.5 * s.size <= 0.98);
            CHECK(s.size >= 0.15);
            CHECK(s.size <= 0.40);
        }
        CHECK(zs.size() == spec.shapes.size());  // distinct z order
    }
    for (int c = 1; c <= 4; ++c) CHECK(count_freq[c] >= 1500);  // >= 15% each
    for (int k = 0; k < 3; ++k) CHECK(kind_freq[k] > 0);
}

TEST_CASE("rendered pixels stay in unit range and inside spec bounds") {
    for (uint64_t seed : {7u, 8u, 9u, 10u, 11u}) {
        auto [img, spec] = generate_scene(seed, 32);
        for (int64_t i = 0; i < img.numel(); ++i) {
            CHECK(img[i] >= 0.0f);
            CHECK(img[i] <= 1.0f);
        }
        // each shape rendered alone only touches pixels inside its own bounds
        for (const auto& s : spec.shapes) {
            SceneSpec solo = spec;
            solo.shapes.assign(1, s);
            for (int c = 0; c < 3; ++c) {
                solo.bg_a[c] = 0.0f;
                solo.bg_b[c] = 0.0f;
            }
            solo.shapes[0].color[0] = solo.shapes[0].color[1] = solo.shapes[0].color[2] = 1.0f;
            Tensor<float> mask = render_scene(solo, 32);
            double pad = 1.0 / 32;  // one pixel of anti-aliasing slack
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    if (mask[int64_t(y) * 32 + x] > 0.0f) {
                        double px = (x + 0.5) / 32.0, py = (y + 0.5) / 32.0;
                        CHECK(px >= s.cx - 0.5 * s.size - pad);
                        CHECK(px <= s.cx + 0.5 * s.size + pad);
                        CHECK(py >= s.cy - 0.5 * s.size - pad);
                        CHECK(py <= s.cy + 0.5 * s.size + pad);
                    }
        }
    }
}

TEST_CASE("descriptor is the multi-hot kind bitmask") {
    SceneSpec spec = one_shape(kShapeCircle, 0.5, 0.5, 0.3);
    CHECK(scene_descriptor(spec) == 1);
    spec.shapes[0].kind = kShapeSquare;
    CHECK(scene_descriptor(spec) == 2);
    spec.shapes[0].kind = kShapeTriangle;
    CHECK(scene_descriptor(spec) == 4);
    SceneShape extra = spec.shapes[0];
    extra.kind = kShapeCircle;
    extra.z = 1;
    spec.shapes.push_back(extra);
    CHECK(scene_descriptor(spec) == 5);
    extra.kind = kShapeSquare;
    extra.z = 2;
    spec.shapes.push_back(extra);
    CHECK(scene_descriptor(spec) == 7);
}

TEST_CASE("task registry covers both splits disjointly") {
    auto meta = split_tasks("meta_train");
    auto novel = split_tasks("novel");
    CHECK(meta == std::vector<std::string>{"edge", "seg", "depth"});
    CHECK(novel == std::vector<std::string>{"blob", "inv_edge", "dilated_edge"});
    CHECK(meta.size() + novel.size() == task_registry().size());
    for (const auto& m : meta)
        for (const auto& n : novel) CHECK(m != n);
    CHECK(find_task("seg").metric == "miou");
    CHECK(find_task("depth").metric == "mse");
    CHECK(find_task("blob").metric == "mse");
    CHECK(find_task("edge").metric == "ssim");
    CHECK_THROWS_AS(find_task("pose"), ConfigError);
    CHECK_THROWS_AS(split_tasks("test"), ConfigError);
}

TEST_CASE("edge family: blank zeros, inversion, dilation") {
    Tensor<float> flat = Tensor<float>::full({3, 16, 16}, 0.37f);
    SceneSpec none;
    Tensor<float> e = extract_condition(flat, none, "edge");
    for (int64_t i = 0; i < e.numel(); ++i) CHECK(e[i] == 0.0f);

    auto [img, spec] = generate_scene(99, 32);
    Tensor<float> edge = extract_condition(img, spec, "edge");
    Tensor<float> inv = extract_condition(img, spec, "inv_edge");
    Tensor<float> dil = extract_condition(img, spec, "dilated_edge");
    bool any_on = false, any_off = false;
    for (int64_t i = 0; i < edge.numel(); ++i) {
        CHECK((edge[i] == 0.0f || edge[i] == 1.0f));
        CHECK(inv[i] == 1.0f - edge[i]);
        CHECK(dil[i] >= edge[i]);  // dilation only grows the mask
        any_on |= edge[i] == 1.0f;
        any_off |= edge[i] == 0.0f;
    }
    CHECK(any_on);
    CHECK(any_off);
    // dilation is exactly the 3x3 neighborhood max
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            float want = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < 32 && xx >= 0 && xx < 32)
                        want = std::max(want, edge[int64_t(yy) * 32 + xx]);
                }
            CHECK(dil[int64_t(y) * 32 + x] == want);
        }
    // extractors are deterministic
    CHECK(same_bits(edge, extract_condition(img, spec, "edge")));
    CHECK_THROWS_AS(extract_condition(Tensor<float>({3, 8, 4}), spec, "edge"), DataError);
}

TEST_CASE("segmentation areas match the analytic shape formulas") {
    const int S = 64;
    struct Case {
        int kind, channel;
        double analytic;
    };
    // size 0.3125 at 64px: circle r=10 -> pi*100, square side 20 -> 400,
    // triangle base=height=20 -> 200
    Case cases[] = {{kShapeCircle, 0, 3.14159265358979 * 100.0},
                    {kShapeSquare, 1, 400.0},
                    {kShapeTriangle, 2, 200.0}};
    for (const Case& c : cases) {
        SceneSpec spec = one_shape(c.kind, 0.5, 0.5, 0.3125);
        Tensor<float> img = render_scene(spec, S);
        Tensor<float> seg = extract_condition(img, spec, "seg");
        int area = count_class(seg, c.channel);
        CHECK(std::abs(area - c.analytic) <= 0.02 * c.analytic);
        for (int other = 0; other < 3; ++other)
            if (other != c.channel) CHECK(count_class(seg, other) == 0);
    }
}

TEST_CASE("depth map ranks nearer shapes brighter") {
    SceneSpec spec = one_shape(kShapeSquare, 0.35, 0.5, 0.3);
    SceneShape near = spec.shapes[0];
    near.kind = kShapeCircle;
    near.cx = 0.55;
    near.z = 1;  // nearer than the square's z=0
    spec.shapes.push_back(near);
    const int S = 64;
    Tensor<float> depth = extract_condition(render_scene(spec, S), spec, "depth");
    auto at = [&](double px, double py) { return depth[int64_t(py * S) * S + int64_t(px * S)]; };
    CHECK(at(0.55, 0.5) == 1.0f);   // circle wins the overlap
    CHECK(at(0.25, 0.5) == 0.5f);   // square alone
    CHECK(at(0.9, 0.9) == 0.0f);    // background
    for (int64_t i = 0; i < depth.numel(); ++i)
        CHECK((depth[i] == 0.0f || depth[i] == 0.5f || depth[i] == 1.0f));
}

TEST_CASE("blob peaks at shape centers and clips to one") {
    const int S = 64;
    SceneSpec spec = one_shape(kShapeCircle, 0.5, 0.5, 0.3);
    Tensor<float> blob = extract_condition(render_scene(spec, S), spec, "blob");
    // center lands on a pixel corner; nearest center is sqrt(0.5) px away
    float peak = 0;
    for (int64_t i = 0; i < int64_t(S) * S; ++i) peak = std::max(peak, blob[i]);
    CHECK(peak > 0.95f);
    CHECK(peak < 1.0f);
    CHECK(blob[0] < 1e-4f);  // far corner decays to ~0
    // two coincident centers would exceed 1 without clipping
    SceneShape twin = spec.shapes[0];
    twin.z = 1;
    spec.shapes.push_back(twin);
    Tensor<float> two = extract_condition(render_scene(spec, S), spec, "blob");
    float peak2 = 0;
    for (int64_t i = 0; i < two.numel(); ++i) {
        peak2 = std::max(peak2, two[i]);
        CHECK(two[i] <= 1.0f);
    }
    CHECK(peak2 == 1.0f);
}

TEST_CASE("episode structure: sizes, disjoint seeds, determinism") {
    Rng rng(42, 7);
    Episode ep = sample_episode("meta_train", rng, 3, 4, 16);
    CHECK(ep.support.pairs.size() == 3);
    CHECK(ep.support_seeds.size() == 3);
    CHECK(ep.query.size() == 4);
    std::set<uint64_t> seeds(ep.support_seeds.begin(), ep.support_seeds.end());
    for (const auto& q : ep.query) seeds.insert(q.seed);
    CHECK(seeds.size() == 7);  // support and query scenes never share a seed
    bool known = false;
    for (const auto& name : split_tasks("meta_train")) known |= name == ep.task_id;
    CHECK(known);
    CHECK(ep.support.task_id == ep.task_id);
    for (const auto& q : ep.query) {
        auto [img, spec] = generate_scene(q.seed, 16);
        CHECK(q.descriptor == scene_descriptor(spec));
        CHECK(same_bits(q.image, img));
        CHECK(same_bits(q.condition, extract_condition(img, spec, ep.task_id)));
    }

    Rng rng_b(42, 7);
    Episode ep_b = sample_episode("meta_train", rng_b, 3, 4, 16);
    CHECK(ep_b.task_id == ep.task_id);
    CHECK(ep_b.support_seeds == ep.support_seeds);
    for (size_t i = 0; i < ep.query.size(); ++i) {
        CHECK(ep_b.query[i].seed == ep.query[i].seed);
        CHECK(same_bits(ep_b.query[i].image, ep.query[i].image));
    }
    CHECK_THROWS_AS(sample_episode("test", rng, 3, 4, 16), ConfigError);
    CHECK_THROWS_AS(sample_episode("meta_train", rng, 0, 4, 16), ConfigError);
}

TEST_CASE("episode task choice is uniform over the split") {
    Rng rng(2024, 11);
    std::map<std::string, int> freq;
    for (int i = 0; i < 1000; ++i)
        ++freq[sample_episode("meta_train", rng, 1, 1, 16).task_id];
    CHECK(freq.size() == 3);
    for (const auto& [name, n] : freq) {
        CHECK(n >= 283);  // 1/3 - 5%
        CHECK(n <= 383);  // 1/3 + 5%
    }
}

TEST_CASE("finetune split arithmetic and disjointness") {
    Rng rng(5, 5);
    FinetuneSplit big = make_finetune_split(30, rng);
    CHECK(big.pseudo_support.size() == 5);
    CHECK(big.pseudo_query.size() == 24);
    CHECK(big.val >= 0);
    FinetuneSplit tiny = make_finetune_split(3, rng);
    CHECK(tiny.pseudo_support.size() == 1);
    CHECK(tiny.pseudo_query.size() == 1);
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng r(seed, 3);
        int n = 3 + int(r.below(40));
        FinetuneSplit fs = make_finetune_split(n, r);
        std::set<int> all(fs.pseudo_support.begin(), fs.pseudo_support.end());
        for (int q : fs.pseudo_query) all.insert(q);
        all.insert(fs.val);
        CHECK(int(all.size()) == n);  // disjoint and exhaustive
        CHECK(int(fs.pseudo_support.size()) == std::min(5, n / 3));
        for (int v : all) {
            CHECK(v >= 0);
            CHECK(v < n);
        }
    }
    CHECK_THROWS_AS(make_finetune_split(2, rng), DataError);
}

TEST_CASE("dataset builds, reloads, and regenerates bit-exactly") {
    std::string dir = "tmp_dataset_test";
    std::filesystem::remove_all(dir);
    DatasetManifest built = build_dataset(dir, 16, 4, 777, "deadbeef");
    CHECK(built.samples.size() == 4);
    DatasetManifest loaded = load_dataset(dir);
    CHECK(loaded.config_hash == "deadbeef");
    CHECK(loaded.image_size == 16);
    CHECK(loaded.seed == 777);
    REQUIRE(loaded.samples.size() == 4);
    std::set<uint64_t> seeds;
    for (size_t i = 0; i < loaded.samples.size(); ++i) {
        const DatasetSample& s = loaded.samples[i];
        CHECK(s.seed == built.samples[i].seed);
        CHECK(s.descriptor == built.samples[i].descriptor);
        CHECK(s.conditions.size() == task_registry().size());
        seeds.insert(s.seed);
        // regeneration from the manifest seed reproduces the stored bytes
        auto [img, spec] = generate_scene(s.seed, loaded.image_size);
        CHECK(s.descriptor == scene_descriptor(spec));
        std::string regen = dir + "/regen.ppm";
        write_ppm(regen, img);
        CHECK(slurp(regen) == slurp(dir + "/" + s.image));
        write_ppm(regen, extract_condition(img, spec, "seg"));
        CHECK(slurp(regen) == slurp(dir + "/" + s.conditions.at("seg")));
    }
    CHECK(seeds.size() == 4);
    CHECK_THROWS_AS(load_dataset("no_such_dir"), DataError);
    CHECK_THROWS_AS(build_dataset(dir, 16, 0, 1, "x"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("ppm image roundtrip quantizes to 255 levels") {
    Tensor<float> img({3, 5, 7});
    Rng rng(31, 1);
    img.fill_uniform(rng, 0.0, 1.0);
    std::string path = "tmp_roundtrip.ppm";
    write_ppm(path, img);
    Tensor<float> back = read_ppm(path);
    REQUIRE(back.shape == img.shape);
    for (int64_t i = 0; i < img.numel(); ++i) {
        float q = float(std::lround(img[i] * 255.0f)) / 255.0f;
        CHECK(back[i] == doctest::Approx(q).epsilon(1e-6));
    }
    CHECK(same_bits(back, read_ppm(path)));
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_ppm("missing_file.ppm"), DataError);
}

TEST_CASE("pixel-only estimators recover conditions from clean renders") {
    const int S = 64;
    struct Case {
        int kind, channel;
    };
    for (const Case& c : {Case{kShapeCircle, 0}, Case{kShapeSquare, 1}, Case{kShapeTriangle, 2}}) {
        SceneSpec spec = one_shape(c.kind, 0.45, 0.55, 0.3);
        Tensor<float> img = render_scene(spec, S);
        Tensor<float> est = estimate_condition(img, "seg");
        Tensor<float> truth = extract_condition(img, spec, "seg");
        // classified into the right class, and mask overlaps the true mask
        CHECK(count_class(est, c.channel) > 0);
        for (int other = 0; other < 3; ++other)
            if (other != c.channel) CHECK(count_class(est, other) == 0);
        int inter = 0, uni = 0;
        for (int64_t i = 0; i < int64_t(S) * S; ++i) {
            bool a = est[int64_t(c.channel) * S * S + i] == 1.0f;
            bool b = truth[int64_t(c.channel) * S * S + i] == 1.0f;
            inter += a && b;
            uni += a || b;
        }
        CHECK(double(inter) / double(uni) > 0.85);

        // blob estimate: centroid lands within ~1px of the true center
        Tensor<float> blob_est = estimate_condition(img, "blob");
        Tensor<float> blob_true = extract_condition(img, spec, "blob");
        double err = 0;
        for (int64_t i = 0; i < blob_est.numel(); ++i)
            err = std::max(err, std::abs(double(blob_est[i]) - double(blob_true[i])));
        CHECK(err < 0.1);
    }
    // depth: two separated shapes, the larger one reads as nearer
    SceneSpec spec = one_shape(kShapeSquare, 0.28, 0.5, 0.34);
    SceneShape small = spec.shapes[0];
    small.kind = kShapeCircle;
    small.cx = 0.75;
    small.size = 0.2;
    small.z = 1;
    spec.shapes.push_back(small);
    Tensor<float> depth_est = estimate_condition(render_scene(spec, S), "depth");
    auto at = [&](double px, double py) {
        return depth_est[int64_t(py * S) * S + int64_t(px * S)];
    };
    CHECK(at(0.28, 0.5) == 1.0f);  // big square nearest by area rank
    CHECK(at(0.75, 0.5) == 0.5f);
    CHECK(at(0.05, 0.05) == 0.0f);
    // edge-family estimators coincide with the extractors
    auto [img, sp] = generate_scene(4242, 32);
    CHECK(same_bits(estimate_condition(img, "edge"), extract_condition(img, sp, "edge")));
    CHECK(same_bits(estimate_condition(img, "inv_edge"), extract_condition(img, sp, "inv_edge")));
}

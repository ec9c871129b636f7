#include "fsc/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "fsc/fastmath.hpp"
#include "fsc/io.hpp"

namespace fsc {

namespace {

constexpr uint64_t kSceneStream = 0x5ce11e;
constexpr double kMinSize = 0.15, kMaxSize = 0.40;
constexpr double kPlaceMargin = 0.05;  // keeps a clean background ring at the border
constexpr float kPalette[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Signed distance in [0,1] units; negative inside. Arithmetic and sqrt only.
double shape_sdf(const SceneShape& s, double px, double py) {
    if (s.kind == kShapeCircle) {
        double dx = px - s.cx, dy = py - s.cy;
        return std::sqrt(dx * dx + dy * dy) - 0.5 * s.size;
    }
    if (s.kind == kShapeSquare) {
        double h = 0.5 * s.size;
        double dx = std::abs(px - s.cx) - h, dy = std::abs(py - s.cy) - h;
        double ox = dx > 0 ? dx : 0, oy = dy > 0 ? dy : 0;
        double outside = std::sqrt(ox * ox + oy * oy);
        double inside = std::min(std::max(dx, dy), 0.0);
        return outside + inside;
    }
    // up-pointing isosceles triangle: apex above, base below (rows grow down)
    double h = 0.5 * s.size;
    double ax = s.cx - h, ay = s.cy + h;  // base left
    double bx = s.cx + h, by = s.cy + h;  // base right
    double cx2 = s.cx, cy2 = s.cy - h;    // apex
    auto edge = [&](double p0x, double p0y, double p1x, double p1y, double rx, double ry) {
        double ex = p1x - p0x, ey = p1y - p0y;
        double nx = ey, ny = -ex;  // a perpendicular; orient away from r below
        double len = std::sqrt(nx * nx + ny * ny);
        nx /= len;
        ny /= len;
        if ((rx - p0x) * nx + (ry - p0y) * ny > 0) {
            nx = -nx;
            ny = -ny;
        }
        return (px - p0x) * nx + (py - p0y) * ny;
    };
    double d_ab = edge(ax, ay, bx, by, cx2, cy2);
    double d_bc = edge(bx, by, cx2, cy2, ax, ay);
    double d_ca = edge(cx2, cy2, ax, ay, bx, by);
    return std::max(d_ab, std::max(d_bc, d_ca));
}

double shape_area(const SceneShape& s) {
    if (s.kind == kShapeCircle) {
        double r = 0.5 * s.size;
        return 3.14159265358979323846 * r * r;
    }
    if (s.kind == kShapeSquare) return s.size * s.size;
    return 0.5 * s.size * s.size;
}

// shapes sorted far-to-near by z
std::vector<const SceneShape*> by_depth(const SceneSpec& spec) {
    std::vector<const SceneShape*> order;
    for (const auto& s : spec.shapes) order.push_back(&s);
    std::sort(order.begin(), order.end(),
              [](const SceneShape* a, const SceneShape* b) { return a->z < b->z; });
    return order;
}

Tensor<float> gray_of(const Tensor<float>& img) {
    int H = img.dim(1), W = img.dim(2);
    Tensor<float> g({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int64_t i = int64_t(y) * W + x;
            g[i] = 0.299f * img[i] + 0.587f * img[int64_t(H) * W + i] +
                   0.114f * img[int64_t(2) * H * W + i];
        }
    return g;
}

// binary edge map: Sobel magnitude over grayscale, threshold 0.2 * max
Tensor<float> edge_map(const Tensor<float>& img) {
    int H = img.dim(1), W = img.dim(2);
    Tensor<float> g = gray_of(img);
    auto at = [&](int y, int x) {
        y = y < 0 ? 0 : (y >= H ? H - 1 : y);
        x = x < 0 ? 0 : (x >= W ? W - 1 : x);
        return double(g[int64_t(y) * W + x]);
    };
    Tensor<float> mag({H, W});
    double mx = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double sx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2 * at(y, x - 1) +
                        2 * at(y, x + 1) - at(y + 1, x - 1) + at(y + 1, x + 1);
            double sy = -at(y - 1, x - 1) - 2 * at(y - 1, x) - at(y - 1, x + 1) +
                        at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1);
            double m = std::sqrt(sx * sx + sy * sy);
            mag[int64_t(y) * W + x] = float(m);
            mx = std::max(mx, m);
        }
    Tensor<float> out({H, W});
    if (mx > 0.0) {
        float th = float(0.2 * mx);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = mag[i] >= th ? 1.0f : 0.0f;
    }
    return out;
}

Tensor<float> dilate3(const Tensor<float>& m) {
    int H = m.dim(0), W = m.dim(1);
    Tensor<float> out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            float v = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < H && xx >= 0 && xx < W)
                        v = std::max(v, m[int64_t(yy) * W + xx]);
                }
            out[int64_t(y) * W + x] = v;
        }
    return out;
}

Tensor<float> replicate3(const Tensor<float>& m) {
    int H = m.dim(0), W = m.dim(1);
    Tensor<float> out({3, H, W});
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < int64_t(H) * W; ++i) out[int64_t(c) * H * W + i] = m[i];
    return out;
}

Tensor<float> seg_from_spec(const SceneSpec& spec, int size) {
    Tensor<float> out({3, size, size});
    auto order = by_depth(spec);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double px = (x + 0.5) / size, py = (y + 0.5) / size;
            const SceneShape* hit = nullptr;
            for (const SceneShape* s : order)  // far to near; nearest hit wins
                if (shape_sdf(*s, px, py) <= 0.0) hit = s;
            if (hit)
                for (int c = 0; c < 3; ++c)
                    out[(int64_t(c) * size + y) * size + x] = kPalette[hit->kind][c];
        }
    return out;
}

Tensor<float> depth_from_spec(const SceneSpec& spec, int size) {
    auto order = by_depth(spec);
    Tensor<float> out({size, size});
    int n = int(order.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double px = (x + 0.5) / size, py = (y + 0.5) / size;
            float v = 0;
            for (int r = 0; r < n; ++r)  // nearer shapes overwrite
                if (shape_sdf(*order[size_t(r)], px, py) <= 0.0) v = float(r + 1) / float(n);
            out[int64_t(y) * size + x] = v;
        }
    return replicate3(out);
}

Tensor<float> blob_at_centers(const std::vector<std::pair<double, double>>& centers, int size) {
    Tensor<float> out({size, size});
    float sigma = 0.05f * float(size);
    float inv2s2 = 1.0f / (2.0f * sigma * sigma);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float acc = 0;
            for (const auto& [cx, cy] : centers) {
                float dx = float(x + 0.5 - cx * size), dy = float(y + 0.5 - cy * size);
                // fast_expf keeps the render bit-stable across libm versions
                acc += fast_expf(-(dx * dx + dy * dy) * inv2s2);
            }
            out[int64_t(y) * size + x] = acc > 1.0f ? 1.0f : acc;
        }
    return replicate3(out);
}

// least-squares plane p ~ a + b*u + c*v fitted to the 1px border ring, the
// region shapes can never reach
void fit_background(const Tensor<float>& img, int ch, double coef[3]) {
    int H = img.dim(1), W = img.dim(2);
    double s1 = 0, su = 0, sv = 0, suu = 0, suv = 0, svv = 0, sp = 0, spu = 0, spv = 0;
    auto add = [&](int y, int x) {
        double u = (x + 0.5) / W, v = (y + 0.5) / H;
        double p = img[(int64_t(ch) * H + y) * W + x];
        s1 += 1;
        su += u;
        sv += v;
        suu += u * u;
        suv += u * v;
        svv += v * v;
        sp += p;
        spu += p * u;
        spv += p * v;
    };
    for (int x = 0; x < W; ++x) {
        add(0, x);
        add(H - 1, x);
    }
    for (int y = 1; y < H - 1; ++y) {
        add(y, 0);
        add(y, W - 1);
    }
    // Cramer on the 3x3 normal equations
    double A[3][3] = {{s1, su, sv}, {su, suu, suv}, {sv, suv, svv}};
    double b[3] = {sp, spu, spv};
    double det = A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1]) -
                 A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0]) +
                 A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]);
    if (std::abs(det) < 1e-12) {
        coef[0] = sp / s1;
        coef[1] = coef[2] = 0;
        return;
    }
    for (int k = 0; k < 3; ++k) {
        double M[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) M[i][j] = j == k ? b[i] : A[i][j];
        double dk = M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) -
                    M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
                    M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]);
        coef[k] = dk / det;
    }
}

struct Component {
    std::vector<int> pixels;  // y*W+x
    int min_x = 1 << 30, max_x = -1, min_y = 1 << 30, max_y = -1;
    double sum_x = 0, sum_y = 0;
    int area() const { return int(pixels.size()); }
};

// foreground = pixels off the fitted background plane; grouped 4-connected
std::vector<Component> find_components(const Tensor<float>& img, double tol) {
    int H = img.dim(1), W = img.dim(2);
    double plane[3][3];
    for (int c = 0; c < 3; ++c) fit_background(img, c, plane[c]);
    std::vector<char> fg(size_t(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double u = (x + 0.5) / W, v = (y + 0.5) / H;
            double dev = 0;
            for (int c = 0; c < 3; ++c) {
                double bgv = plane[c][0] + plane[c][1] * u + plane[c][2] * v;
                dev = std::max(dev, std::abs(double(img[(int64_t(c) * H + y) * W + x]) - bgv));
            }
            fg[size_t(y) * W + x] = dev > tol ? 1 : 0;
        }
    std::vector<int> label(size_t(H) * W, -1);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int start = 0; start < H * W; ++start) {
        if (!fg[size_t(start)] || label[size_t(start)] >= 0) continue;
        Component comp;
        stack.assign(1, start);
        label[size_t(start)] = int(comps.size());
        while (!stack.empty()) {
            int p = stack.back();
            stack.pop_back();
            int y = p / W, x = p % W;
            comp.pixels.push_back(p);
            comp.min_x = std::min(comp.min_x, x);
            comp.max_x = std::max(comp.max_x, x);
            comp.min_y = std::min(comp.min_y, y);
            comp.max_y = std::max(comp.max_y, y);
            comp.sum_x += x + 0.5;
            comp.sum_y += y + 0.5;
            const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                int yy = y + dy[k], xx = x + dx[k];
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                int q = yy * W + xx;
                if (fg[size_t(q)] && label[size_t(q)] < 0) {
                    label[size_t(q)] = int(comps.size());
                    stack.push_back(q);
                }
            }
        }
        if (comp.area() >= 6) comps.push_back(std::move(comp));
    }
    return comps;
}

int classify_fill_ratio(const Component& c) {
    double bw = c.max_x - c.min_x + 1, bh = c.max_y - c.min_y + 1;
    double ratio = double(c.area()) / (bw * bh);
    if (ratio < 0.64) return kShapeTriangle;  // ~0.50 fills its box
    if (ratio < 0.89) return kShapeCircle;    // ~0.785
    return kShapeSquare;                      // ~1.0
}

constexpr double kForegroundTol = 0.12;

}  // namespace

SceneSpec sample_scene(uint64_t seed) {
    Rng rng(seed, kSceneStream);
    SceneSpec spec;
    spec.seed = seed;
    for (int c = 0; c < 3; ++c) spec.bg_a[c] = float(rng.uniform());
    for (int c = 0; c < 3; ++c) spec.bg_b[c] = float(rng.uniform());
    spec.gx = rng.uniform(-1.0, 1.0);
    spec.gy = rng.uniform(-1.0, 1.0);
    int count = 1 + int(rng.below(4));
    std::vector<int> zs(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) zs[size_t(i)] = i;
    rng.shuffle(zs);
    for (int i = 0; i < count; ++i) {
        SceneShape s;
        s.kind = int(rng.below(3));
        s.size = rng.uniform(kMinSize, kMaxSize);
        double margin = 0.5 * s.size + kPlaceMargin;
        s.cx = rng.uniform(margin, 1.0 - margin);
        s.cy = rng.uniform(margin, 1.0 - margin);
        for (int c = 0; c < 3; ++c) s.color[c] = float(rng.uniform(0.15, 1.0));
        s.z = zs[size_t(i)];
        spec.shapes.push_back(s);
    }
    return spec;
}

Tensor<float> render_scene(const SceneSpec& spec, int size) {
    if (size < 8) throw ConfigError("render: image size must be >= 8");
    Tensor<float> img({3, size, size});
    double tmin = std::min(0.0, spec.gx) + std::min(0.0, spec.gy);
    double tmax = std::max(0.0, spec.gx) + std::max(0.0, spec.gy);
    double span = tmax - tmin;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double u = (x + 0.5) / size, v = (y + 0.5) / size;
            double t = span > 1e-9 ? (spec.gx * u + spec.gy * v - tmin) / span : 0.5;
            for (int c = 0; c < 3; ++c)
                img[(int64_t(c) * size + y) * size + x] =
                    float(spec.bg_a[c] + (spec.bg_b[c] - spec.bg_a[c]) * t);
        }
    auto order = by_depth(spec);
    for (const SceneShape* s : order) {
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double px = (x + 0.5) / size, py = (y + 0.5) / size;
                double sd_px = shape_sdf(*s, px, py) * size;
                double cov = clamp01(0.5 - sd_px);
                if (cov <= 0.0) continue;
                for (int c = 0; c < 3; ++c) {
                    int64_t i = (int64_t(c) * size + y) * size + x;
                    img[i] = float(img[i] + (s->color[c] - img[i]) * cov);
                }
            }
    }
    return img;
}

std::pair<Tensor<float>, SceneSpec> generate_scene(uint64_t seed, int size) {
    SceneSpec spec = sample_scene(seed);
    return {render_scene(spec, size), spec};
}

int scene_descriptor(const SceneSpec& spec) {
    int id = 0;
    for (const auto& s : spec.shapes) id |= 1 << s.kind;
    FSC_CHECK(id >= 1 && id <= 7, "descriptor range");
    return id;
}

const std::vector<TaskDef>& task_registry() {
    static const std::vector<TaskDef> defs = {
        {"edge", "meta_train", "ssim"},       {"seg", "meta_train", "miou"},
        {"depth", "meta_train", "mse"},       {"blob", "novel", "mse"},
        {"inv_edge", "novel", "ssim"},        {"dilated_edge", "novel", "ssim"},
    };
    return defs;
}

const TaskDef& find_task(const std::string& name) {
    for (const auto& t : task_registry())
        if (t.name == name) return t;
    throw ConfigError("unknown task: " + name);
}

std::vector<std::string> split_tasks(const std::string& split) {
    if (split != "meta_train" && split != "novel") throw ConfigError("unknown split: " + split);
    std::vector<std::string> out;
    for (const auto& t : task_registry())
        if (t.split == split) out.push_back(t.name);
    return out;
}

Tensor<float> extract_condition(const Tensor<float>& image, const SceneSpec& spec,
                                const std::string& task) {
    const TaskDef& def = find_task(task);
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
        throw DataError("extract: image must be [3,S,S]");
    int size = image.dim(1);
    if (def.name == "edge") return replicate3(edge_map(image));
    if (def.name == "inv_edge") {
        Tensor<float> e = edge_map(image);
        for (auto& v : e.v) v = 1.0f - v;
        return replicate3(e);
    }
    if (def.name == "dilated_edge") return replicate3(dilate3(edge_map(image)));
    if (def.name == "seg") return seg_from_spec(spec, size);
    if (def.name == "depth") return depth_from_spec(spec, size);
    // blob: unit Gaussians at every shape center
    std::vector<std::pair<double, double>> centers;
    for (const auto& s : spec.shapes) centers.emplace_back(s.cx, s.cy);
    return blob_at_centers(centers, size);
}

Tensor<float> estimate_condition(const Tensor<float>& image, const std::string& task) {
    const TaskDef& def = find_task(task);
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
        throw DataError("estimate: image must be [3,S,S]");
    int size = image.dim(1);
    if (def.name == "edge" || def.name == "inv_edge" || def.name == "dilated_edge") {
        SceneSpec none;
        return extract_condition(image, none, task);
    }
    std::vector<Component> comps = find_components(image, kForegroundTol);
    if (def.name == "seg") {
        Tensor<float> out({3, size, size});
        for (const auto& comp : comps) {
            int kind = classify_fill_ratio(comp);
            for (int p : comp.pixels)
                for (int c = 0; c < 3; ++c)
                    out[int64_t(c) * size * size + p] = kPalette[kind][c];
        }
        return out;
    }
    if (def.name == "depth") {
        // visible-area rank heuristic: larger components read as nearer
        std::vector<int> order(comps.size());
        for (size_t i = 0; i < comps.size(); ++i) order[i] = int(i);
        std::sort(order.begin(), order.end(),
                  [&](int a, int b) { return comps[size_t(a)].area() < comps[size_t(b)].area(); });
        Tensor<float> out({size, size});
        int n = int(comps.size());
        for (int r = 0; r < n; ++r)
            for (int p : comps[size_t(order[size_t(r)])].pixels)
                out[p] = float(r + 1) / float(n);
        return replicate3(out);
    }
    if (def.name == "blob") {
        // bbox midpoint, not the pixel centroid: triangles are bottom-heavy
        std::vector<std::pair<double, double>> centers;
        for (const auto& comp : comps)
            centers.emplace_back(0.5 * (comp.min_x + comp.max_x + 1) / size,
                                 0.5 * (comp.min_y + comp.max_y + 1) / size);
        return blob_at_centers(centers, size);
    }
    throw ConfigError("unknown task: " + task);
}

Episode sample_episode(const std::string& split, Rng& rng, int support_n, int query_n,
                       int image_size) {
    if (support_n < 1 || query_n < 1) throw ConfigError("episode: need support and query >= 1");
    std::vector<std::string> tasks = split_tasks(split);
    FSC_CHECK(!tasks.empty(), "empty split");
    Episode ep;
    ep.task_id = tasks[rng.below(uint32_t(tasks.size()))];
    ep.support.task_id = ep.task_id;
    std::set<uint64_t> used;
    auto draw_seed = [&] {
        uint64_t s = rng.next64();
        while (!used.insert(s).second) s = rng.next64();
        return s;
    };
    for (int i = 0; i < support_n; ++i) {
        uint64_t seed = draw_seed();
        auto [img, spec] = generate_scene(seed, image_size);
        Tensor<float> cond = extract_condition(img, spec, ep.task_id);
        ep.support_seeds.push_back(seed);
        ep.support.pairs.emplace_back(std::move(img), std::move(cond));
    }
    for (int i = 0; i < query_n; ++i) {
        EpisodeQuery q;
        q.seed = draw_seed();
        auto [img, spec] = generate_scene(q.seed, image_size);
        q.descriptor = scene_descriptor(spec);
        q.condition = extract_condition(img, spec, ep.task_id);
        q.image = std::move(img);
        ep.query.push_back(std::move(q));
    }
    return ep;
}

FinetuneSplit make_finetune_split(int support_size, Rng& rng) {
    if (support_size < 3) throw DataError("finetune split: need at least 3 support pairs");
    std::vector<int> perm(static_cast<size_t>(support_size));
    for (int i = 0; i < support_size; ++i) perm[size_t(i)] = i;
    rng.shuffle(perm);
    FinetuneSplit out;
    out.val = perm[0];
    int sn = std::min(5, support_size / 3);
    for (int i = 1; i <= sn; ++i) out.pseudo_support.push_back(perm[size_t(i)]);
    for (int i = sn + 1; i < support_size; ++i) out.pseudo_query.push_back(perm[size_t(i)]);
    return out;
}

DatasetManifest build_dataset(const std::string& dir, int image_size, int count, uint64_t seed,
                              const std::string& config_hash) {
    if (count < 1) throw ConfigError("dataset: count must be >= 1");
    std::filesystem::create_directories(dir);
    for (const auto& t : task_registry()) std::filesystem::create_directories(dir + "/" + t.name);
    DatasetManifest man;
    man.config_hash = config_hash;
    man.image_size = image_size;
    man.seed = seed;
    Rng rng(seed, 0xda7a5e7);
    std::set<uint64_t> used;
    for (int i = 0; i < count; ++i) {
        uint64_t s = rng.next64();
        while (!used.insert(s).second) s = rng.next64();
        auto [img, spec] = generate_scene(s, image_size);
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06d", i);
        DatasetSample sample;
        sample.seed = s;
        sample.descriptor = scene_descriptor(spec);
        sample.image = std::string("img_") + stem + ".ppm";
        write_ppm(dir + "/" + sample.image, img);
        for (const auto& t : task_registry()) {
            std::string name = t.name + "/cond_" + stem + ".ppm";
            write_ppm(dir + "/" + name, extract_condition(img, spec, t.name));
            sample.conditions[t.name] = name;
        }
        man.samples.push_back(std::move(sample));
    }
    nlohmann::json j;
    j["config_hash"] = man.config_hash;
    j["image_size"] = man.image_size;
    j["seed"] = man.seed;
    j["count"] = int(man.samples.size());
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : man.samples) {
        nlohmann::json js;
        js["seed"] = s.seed;
        js["descriptor"] = s.descriptor;
        js["image"] = s.image;
        js["conditions"] = s.conditions;
        samples.push_back(std::move(js));
    }
    j["samples"] = std::move(samples);
    std::ofstream out(dir + "/manifest.json", std::ios::trunc);
    if (!out) throw DataError("dataset: cannot write manifest in " + dir);
    out << j.dump(2) << "\n";
    return man;
}

DatasetManifest load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw DataError("dataset: missing manifest.json in " + dir);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("dataset: malformed manifest: ") + e.what());
    }
    DatasetManifest man;
    try {
        man.config_hash = j.at("config_hash").get<std::string>();
        man.image_size = j.at("image_size").get<int>();
        man.seed = j.at("seed").get<uint64_t>();
        for (const auto& js : j.at("samples")) {
            DatasetSample s;
            s.seed = js.at("seed").get<uint64_t>();
            s.descriptor = js.at("descriptor").get<int>();
            s.image = js.at("image").get<std::string>();
            if (js.contains("conditions"))
                s.conditions = js.at("conditions").get<std::map<std::string, std::string>>();
            man.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("dataset: manifest field error: ") + e.what());
    }
    if (man.samples.empty()) throw DataError("dataset: manifest lists no samples");
    return man;
}

}  // namespace fsc

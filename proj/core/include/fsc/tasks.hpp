#pragma once

// Procedural scene universe and the control-task registry.
//
// Scenes are 1-4 anti-aliased axis-aligned shapes (circle / square / up
// triangle) over a smooth linear-gradient background, rendered with plain
// arithmetic and sqrt only, so a seed reproduces the same pixels on any
// platform. Conditions come in two flavors: extract_condition uses the scene
// description where the task calls for exact geometry (seg / depth / blob),
// while estimate_condition recovers every condition from pixels alone, which
// is what evaluation applies to generated images.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fsc/adapter.hpp"
#include "fsc/rng.hpp"
#include "fsc/tensor.hpp"

namespace fsc {

inline constexpr int kShapeCircle = 0, kShapeSquare = 1, kShapeTriangle = 2;

struct SceneShape {
    int kind = 0;
    double cx = 0, cy = 0;  // center in [0,1]^2
    double size = 0;        // diameter / side / base-and-height in [0,1] units
    float color[3] = {0, 0, 0};
    int z = 0;  // distinct; higher = nearer
};

struct SceneSpec {
    uint64_t seed = 0;
    std::vector<SceneShape> shapes;  // 1..4
    float bg_a[3] = {0, 0, 0}, bg_b[3] = {0, 0, 0};
    double gx = 0, gy = 0;  // background gradient direction
};

SceneSpec sample_scene(uint64_t seed);
Tensor<float> render_scene(const SceneSpec& spec, int size);
std::pair<Tensor<float>, SceneSpec> generate_scene(uint64_t seed, int size);

// Multi-hot shape-kind bitmask (circle=1, square=2, triangle=4): 1..7.
// Id 0 stays reserved for the guidance-free null row.
int scene_descriptor(const SceneSpec& spec);

struct TaskDef {
    std::string name;    // edge, seg, depth, blob, inv_edge, dilated_edge
    std::string split;   // meta_train | novel
    std::string metric;  // ssim | miou | mse
};

const std::vector<TaskDef>& task_registry();
const TaskDef& find_task(const std::string& name);  // ConfigError when unknown
std::vector<std::string> split_tasks(const std::string& split);

// Condition from ground-truth geometry (spec) or from pixels (image), per
// task definition. Output is [3,H,W] in [0,1].
Tensor<float> extract_condition(const Tensor<float>& image, const SceneSpec& spec,
                                const std::string& task);

// Pixel-only condition estimate used to score generated images.
Tensor<float> estimate_condition(const Tensor<float>& image, const std::string& task);

struct EpisodeQuery {
    uint64_t seed = 0;
    int descriptor = 0;
    Tensor<float> image, condition;  // [0,1]
};

struct Episode {
    std::string task_id;
    std::vector<uint64_t> support_seeds;
    SupportSet<float> support;  // images/conditions in [0,1]
    std::vector<EpisodeQuery> query;
};

Episode sample_episode(const std::string& split, Rng& rng, int support_n, int query_n,
                       int image_size);

// Indices into a support set: one held-out validation pair, a pseudo-support
// of min(5, |S|/3), and the rest as pseudo-queries.
struct FinetuneSplit {
    std::vector<int> pseudo_support, pseudo_query;
    int val = -1;
};

FinetuneSplit make_finetune_split(int support_size, Rng& rng);

struct DatasetSample {
    uint64_t seed = 0;
    int descriptor = 0;
    std::string image;                             // file name relative to dir
    std::map<std::string, std::string> conditions;  // task -> file name
};

struct DatasetManifest {
    std::string config_hash;
    int image_size = 0;
    uint64_t seed = 0;
    std::vector<DatasetSample> samples;
};

DatasetManifest build_dataset(const std::string& dir, int image_size, int count, uint64_t seed,
                              const std::string& config_hash);
DatasetManifest load_dataset(const std::string& dir);

}  // namespace fsc

#pragma once

// Inference-side surface: restoring checkpoints into runnable models,
// few-shot guided sampling, controllability scoring by re-extracting the
// condition from generated images, and the report artifacts.

#include <functional>
#include <string>
#include <vector>

#include "fsc/trainer.hpp"

namespace fsc {

// Rebuild a model from a checkpoint directory: architecture from `cfg`
// (which must hash-match the checkpoint's model identity), control path
// attached when the stage has one, tensors loaded strictly.
CheckpointMeta load_model(Model& m, const RunConfig& cfg, const std::string& ckpt_dir);

// Plain backbone sampling (no control tap); the conditional branch uses
// `descriptor`, the unconditional branch the null id.
Tensor<float> sample_backbone(Model& m, int descriptor, uint64_t seed);

// Guided sampling of one image (returned in [0,1]) from a query condition
// in [0,1]. The unconditional guidance branch nulls the descriptor and, per
// config, omits the control injection.
Tensor<float> generate_image(Model& m, const std::string& task,
                             const std::vector<LabeledPair>& support,
                             const Tensor<float>& condition, int descriptor, uint64_t seed);

struct GenerateReport {
    std::string task, out_dir;
    std::vector<std::string> images;  // file names relative to out_dir
    std::string config_hash;
};

// Writes n_images PPMs plus one provenance sidecar each. Support pairs are
// the first inference.support_pairs entries of support_dir; query conditions
// come from queries_dir (or, when empty, from support_dir starting right
// after the support pairs).
GenerateReport cmd_generate(Model& m, const CheckpointMeta& ckpt, const std::string& task,
                            const std::string& support_dir, const std::string& queries_dir,
                            int n_images, const std::string& out_dir);

struct EvalReport {
    std::string task, metric;
    int n_samples = 0;
    double scale = 1;  // applied to every value before reporting
    std::vector<double> values;
    std::vector<uint64_t> seeds;  // query scene seeds, parallel to values
    double mean = 0, stddev = 0;
    std::string config_hash, checkpoint_stage, checkpoint_hash;
};

// produces the image scored against one query; tests may inject oracles
using GenerateFn =
    std::function<Tensor<float>(const Tensor<float>& condition, int descriptor, uint64_t seed)>;

// Score `gen` on the first n_limit (<=0: all) eval queries: estimate the
// condition from each generated image and compare with the query condition
// under the task metric. Support/eval seed pools must be disjoint.
EvalReport evaluate_with(const GenerateFn& gen, const RunConfig& cfg, const std::string& task,
                         const std::vector<uint64_t>& support_seeds, const std::string& eval_dir,
                         int n_limit);

// The production path: images from generate_image on the loaded model.
EvalReport evaluate_model(Model& m, const CheckpointMeta& ckpt, const std::string& task,
                          const std::string& support_dir, const std::string& eval_dir,
                          int n_limit);

void write_eval_report(const EvalReport& rep, const std::string& path);
EvalReport read_eval_report(const std::string& path);

struct PartitionInfo {
    std::string name;
    int tensors = 0;
    int64_t params = 0;
    bool frozen = false;  // untouched by the checkpoint's stage
};

struct ParamReport {
    std::string stage, config_hash;
    std::vector<PartitionInfo> partitions;
    int64_t total = 0;
    double max_task_ratio = 0;  // largest task-bias share of the total
};

// Summarize a checkpoint's partitions; a task-bias share at or above `cap`
// is a data error (the per-task surface must stay lightweight).
ParamReport param_report(const std::string& ckpt_dir, double cap);
std::string format_param_report(const ParamReport& rep);

}  // namespace fsc

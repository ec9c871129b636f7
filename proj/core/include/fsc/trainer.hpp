#pragma once

// The three optimization stages: backbone pretraining on noise prediction,
// episodic meta-training of the control path across the training tasks, and
// few-shot fine-tuning on a novel task's support set. Every stage audits its
// parameter partitions: what it may update changes, everything else must
// stay bit-identical.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fsc/adapter.hpp"
#include "fsc/backbone.hpp"
#include "fsc/checkpoint.hpp"
#include "fsc/config.hpp"
#include "fsc/encoders.hpp"
#include "fsc/optim.hpp"
#include "fsc/sched.hpp"
#include "fsc/tasks.hpp"

namespace fsc {

// [0,1] image -> [-1,1] model domain
inline Tensor<float> to_signed(const Tensor<float>& x) {
    Tensor<float> y = x;
    for (auto& v : y.v) v = 2.0f * v - 1.0f;
    return y;
}

// one support/query element with its provenance
struct LabeledPair {
    uint64_t seed = 0;
    int descriptor = 0;
    Tensor<float> image, condition;  // [0,1]
};

struct TrainReport {
    std::string stage;
    int steps = 0;
    std::vector<double> loss_trace;               // one entry per step
    std::vector<std::string> updated_partitions;  // audit: partitions that changed
    double wall_seconds = 0;
    bool early_stopped = false;
    // fine-tune validation curve: before the first update, best seen, last
    double val_first = 0, val_best = 0, val_last = 0;
    std::string checkpoint_dir;
};

// Backbone plus (optionally) the control path, with the parameter store that
// mirrors the current partition layout.
struct Model {
    RunConfig cfg;
    NoiseSchedule sched;
    Backbone<float> net;
    EncoderPair<float> pair;
    ControlAdapter<float> adapter;
    ParamStore<float> store;
    bool with_adapter = false;

    // the store holds raw pointers into the member networks, so the whole
    // bundle must stay put
    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    // backbone only; store = {backbone}
    void init(const RunConfig& cfg);

    // clone encoders off the (already loaded) backbone, register `tasks`,
    // initialize the adapter, and rebuild the store with all partitions;
    // backbone and image encoder become non-trainable
    void attach_adapter(const std::vector<std::string>& tasks);

    // register one more task (bias init = mean of registered sets) and
    // refresh the store
    void add_task(const std::string& task);

    void rebuild_store();
};

// One Monte-Carlo element of the denoising objective.
struct NoiseDraw {
    int t = 0;           // uniform in {1..T}
    int descriptor = 0;  // nulled when dropped
    bool dropped = false;
    Tensor<float> z_t, eps;
};

// prediction head evaluated per draw; tests may inject oracles
using EpsModel = std::function<Var(Tape<float>&, const NoiseDraw&)>;

// Sample (t, eps, drop) per batch element and form z_t by closed-form
// corruption of z0 (given in [-1,1]).
std::vector<NoiseDraw> draw_noise_batch(const std::vector<const Tensor<float>*>& z0,
                                        const std::vector<int>& descriptors,
                                        const NoiseSchedule& sched, Rng& rng, double drop_prob);

// Mean over draws of per-element squared error between eps and fn's output.
Var denoise_loss_graph(Tape<float>& t, const EpsModel& fn, const std::vector<NoiseDraw>& draws);

// Convenience evaluation on a fresh no-gradient tape.
double denoise_loss(const EpsModel& fn, const std::vector<NoiseDraw>& draws);

// Identity of the tensors a checkpoint can legally restore into: hash of the
// model architecture plus the diffusion schedule. Stored in checkpoint
// provenance; step counts and rates may differ between producer and consumer.
std::string model_hash(const RunConfig& cfg);

// First `limit` dataset samples (manifest order) with the named task's
// conditions; limit <= 0 loads everything.
std::vector<LabeledPair> load_support(const std::string& dir, const std::string& task, int limit);

// Stage drivers. Each optimizes, audits partitions, saves a checkpoint with
// optimizer state to `out_ckpt` (when nonempty), and reports. `resume_ckpt`
// continues bit-exactly from a saved run of the same stage.
TrainReport pretrain_backbone(Model& m, const DatasetManifest& data, const std::string& out_ckpt,
                              const std::string& resume_ckpt = "");

TrainReport meta_train(Model& m, const std::string& out_ckpt, bool no_matching = false,
                       const std::string& resume_ckpt = "");

TrainReport finetune(Model& m, const std::string& task, const std::vector<LabeledPair>& support,
                     const std::string& out_ckpt);

}  // namespace fsc

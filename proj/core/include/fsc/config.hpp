#pragma once

// Run configuration: one JSON document with a default for every field,
// strict unknown-key rejection with dotted field paths, dotted-path
// overrides, and a canonical SHA-256 hash stamped into every artifact.

#include <string>
#include <vector>

#include "fsc/backbone.hpp"

namespace fsc {

struct ScheduleConfig {
    int timesteps = 200;
    double beta_start = 1e-4, beta_end = 0.02;
};

struct TasksConfig {
    int train_count = 512;   // pretrain / meta-train scene pool
    int eval_count = 64;     // held-out query pool
    int support_count = 30;  // few-shot support pool per task
};

struct TrainConfig {
    double lr = 1e-4;  // desk-scale default
    double full_scale_lr = 1e-5;  // reference rate for full-scale runs
    double weight_decay = 0.01;
    double cfg_drop_prob = 0.1;  // descriptor nulling rate during pretrain
    double bias_cap = 0.05;      // per-task bias budget vs shared encoder
    int batch_size = 16;
    int pretrain_steps = 4000;
    int meta_steps = 1500;
    int episodes_per_step = 2;
    int support_n = 3;  // support pairs per meta-train episode
    int query_n = 2;    // query scenes per episode
    int matching_heads = 8;
    int log_every = 50;
};

struct FinetuneConfig {
    double lr = 1e-4;
    int max_steps = 600;
    int batch_size = 10;
    int eval_every = 10;  // validation cadence in steps
    int patience = 50;    // stagnant validations before early stop
    bool repartition = true;  // new pseudo split each step
};

struct InferenceConfig {
    int steps = 50;
    double cfg_scale = 7.5;
    int support_pairs = 5;  // pairs consumed at generation time
    uint64_t seed = 42;
    bool clamp_x0 = true;
    bool cfg_null_control = true;  // unconditional branch zeroes control too
};

struct PathsConfig {
    std::string data_dir = "data";
    std::string ckpt_dir = "ckpt";
    std::string out_dir = "out";
};

struct RunConfig {
    BackboneConfig backbone;
    ScheduleConfig schedule;
    TasksConfig tasks;
    TrainConfig train;
    FinetuneConfig finetune;
    InferenceConfig inference;
    PathsConfig paths;

    void validate() const;  // ConfigError naming the offending field
};

// Canonical JSON (sorted keys, 2-space indent) for files and reports.
std::string config_text(const RunConfig& cfg);

// Strict parse: every key must exist in the defaults document, recursively;
// violations raise ConfigError with the dotted path.
RunConfig parse_config_text(const std::string& json_text);

// Defaults, optionally overlaid with a JSON file and key=value overrides
// (dotted paths, values parsed as JSON with plain-string fallback).
// Empty path = defaults only. Validates before returning.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

// SHA-256 of the canonical compact serialization.
std::string config_hash(const RunConfig& cfg);

// Hash of one top-level section (for artifact caching). ConfigError when the
// section does not exist.
std::string section_hash(const RunConfig& cfg, const std::string& section);

}  // namespace fsc

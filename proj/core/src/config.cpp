#include "fsc/config.hpp"

#include <fstream>

#include <json.hpp>

#include "fsc/digest.hpp"

namespace fsc {

namespace {

using nlohmann::json;

json to_json(const RunConfig& c) {
    json j;
    j["backbone"] = {{"in_channels", c.backbone.in_channels},
                     {"base_channels", c.backbone.base_channels},
                     {"channel_multipliers", c.backbone.channel_multipliers},
                     {"time_embed_dim", c.backbone.time_embed_dim},
                     {"cond_embed_dim", c.backbone.cond_embed_dim},
                     {"image_size", c.backbone.image_size},
                     {"attn_heads", c.backbone.attn_heads},
                     {"descriptor_rows", c.backbone.descriptor_rows}};
    j["schedule"] = {{"timesteps", c.schedule.timesteps},
                     {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end}};
    j["tasks"] = {{"train_count", c.tasks.train_count},
                  {"eval_count", c.tasks.eval_count},
                  {"support_count", c.tasks.support_count}};
    j["train"] = {{"lr", c.train.lr},
                  {"full_scale_lr", c.train.full_scale_lr},
                  {"weight_decay", c.train.weight_decay},
                  {"cfg_drop_prob", c.train.cfg_drop_prob},
                  {"bias_cap", c.train.bias_cap},
                  {"batch_size", c.train.batch_size},
                  {"pretrain_steps", c.train.pretrain_steps},
                  {"meta_steps", c.train.meta_steps},
                  {"episodes_per_step", c.train.episodes_per_step},
                  {"support_n", c.train.support_n},
                  {"query_n", c.train.query_n},
                  {"matching_heads", c.train.matching_heads},
                  {"log_every", c.train.log_every}};
    j["finetune"] = {{"lr", c.finetune.lr},
                     {"max_steps", c.finetune.max_steps},
                     {"batch_size", c.finetune.batch_size},
                     {"eval_every", c.finetune.eval_every},
                     {"patience", c.finetune.patience},
                     {"repartition", c.finetune.repartition}};
    j["inference"] = {{"steps", c.inference.steps},
                      {"cfg_scale", c.inference.cfg_scale},
                      {"support_pairs", c.inference.support_pairs},
                      {"seed", c.inference.seed},
                      {"clamp_x0", c.inference.clamp_x0},
                      {"cfg_null_control", c.inference.cfg_null_control}};
    j["paths"] = {{"data_dir", c.paths.data_dir},
                  {"ckpt_dir", c.paths.ckpt_dir},
                  {"out_dir", c.paths.out_dir}};
    return j;
}

RunConfig from_json(const json& j) {
    RunConfig c;
    const json& b = j.at("backbone");
    c.backbone.in_channels = b.at("in_channels").get<int>();
    c.backbone.base_channels = b.at("base_channels").get<int>();
    c.backbone.channel_multipliers = b.at("channel_multipliers").get<std::vector<int>>();
    c.backbone.time_embed_dim = b.at("time_embed_dim").get<int>();
    c.backbone.cond_embed_dim = b.at("cond_embed_dim").get<int>();
    c.backbone.image_size = b.at("image_size").get<int>();
    c.backbone.attn_heads = b.at("attn_heads").get<int>();
    c.backbone.descriptor_rows = b.at("descriptor_rows").get<int>();
    const json& s = j.at("schedule");
    c.schedule.timesteps = s.at("timesteps").get<int>();
    c.schedule.beta_start = s.at("beta_start").get<double>();
    c.schedule.beta_end = s.at("beta_end").get<double>();
    const json& k = j.at("tasks");
    c.tasks.train_count = k.at("train_count").get<int>();
    c.tasks.eval_count = k.at("eval_count").get<int>();
    c.tasks.support_count = k.at("support_count").get<int>();
    const json& t = j.at("train");
    c.train.lr = t.at("lr").get<double>();
    c.train.full_scale_lr = t.at("full_scale_lr").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.cfg_drop_prob = t.at("cfg_drop_prob").get<double>();
    c.train.bias_cap = t.at("bias_cap").get<double>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.pretrain_steps = t.at("pretrain_steps").get<int>();
    c.train.meta_steps = t.at("meta_steps").get<int>();
    c.train.episodes_per_step = t.at("episodes_per_step").get<int>();
    c.train.support_n = t.at("support_n").get<int>();
    c.train.query_n = t.at("query_n").get<int>();
    c.train.matching_heads = t.at("matching_heads").get<int>();
    c.train.log_every = t.at("log_every").get<int>();
    const json& f = j.at("finetune");
    c.finetune.lr = f.at("lr").get<double>();
    c.finetune.max_steps = f.at("max_steps").get<int>();
    c.finetune.batch_size = f.at("batch_size").get<int>();
    c.finetune.eval_every = f.at("eval_every").get<int>();
    c.finetune.patience = f.at("patience").get<int>();
    c.finetune.repartition = f.at("repartition").get<bool>();
    const json& i = j.at("inference");
    c.inference.steps = i.at("steps").get<int>();
    c.inference.cfg_scale = i.at("cfg_scale").get<double>();
    c.inference.support_pairs = i.at("support_pairs").get<int>();
    c.inference.seed = i.at("seed").get<uint64_t>();
    c.inference.clamp_x0 = i.at("clamp_x0").get<bool>();
    c.inference.cfg_null_control = i.at("cfg_null_control").get<bool>();
    const json& p = j.at("paths");
    c.paths.data_dir = p.at("data_dir").get<std::string>();
    c.paths.ckpt_dir = p.at("ckpt_dir").get<std::string>();
    c.paths.out_dir = p.at("out_dir").get<std::string>();
    return c;
}

const char* kind_name(const json& v) {
    if (v.is_object()) return "object";
    if (v.is_array()) return "array";
    if (v.is_string()) return "string";
    if (v.is_boolean()) return "boolean";
    if (v.is_number()) return "number";
    return "null";
}

bool same_kind(const json& a, const json& b) {
    return std::string(kind_name(a)) == kind_name(b);
}

// overlay `user` onto `base`; every user key must already exist in base
void merge_strict(json& base, const json& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config section is not an object at " + path);
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string sub = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key: " + sub);
        json& slot = base[it.key()];
        if (slot.is_object()) {
            merge_strict(slot, it.value(), sub);
        } else {
            if (!same_kind(slot, it.value()))
                throw ConfigError("config type mismatch at " + sub + ": expected " +
                                  kind_name(slot) + ", got " + kind_name(it.value()));
            slot = it.value();
        }
    }
}

void apply_override(json& base, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like section.key=value: " + kv);
    std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // unquoted strings pass through
    json patch = std::move(value);
    for (size_t end = key.size();;) {
        size_t dot = key.rfind('.', end - 1);
        std::string part = key.substr(dot == std::string::npos ? 0 : dot + 1,
                                      end - (dot == std::string::npos ? 0 : dot + 1));
        if (part.empty()) throw ConfigError("bad override path: " + key);
        json wrap;
        wrap[part] = std::move(patch);
        patch = std::move(wrap);
        if (dot == std::string::npos) break;
        end = dot;
    }
    merge_strict(base, patch, "");
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace

void RunConfig::validate() const {
    backbone.validate();
    check(schedule.timesteps >= 1, "schedule.timesteps must be >= 1");
    check(schedule.beta_start > 0 && schedule.beta_start <= schedule.beta_end &&
              schedule.beta_end < 1,
          "schedule.beta_start/beta_end must satisfy 0 < start <= end < 1");
    check(tasks.train_count >= 1, "tasks.train_count must be >= 1");
    check(tasks.eval_count >= 1, "tasks.eval_count must be >= 1");
    check(tasks.support_count >= 3, "tasks.support_count must be >= 3");
    check(train.lr > 0, "train.lr must be positive");
    check(train.weight_decay >= 0, "train.weight_decay must be >= 0");
    check(train.cfg_drop_prob >= 0 && train.cfg_drop_prob <= 1,
          "train.cfg_drop_prob must lie in [0,1]");
    check(train.bias_cap > 0 && train.bias_cap <= 1, "train.bias_cap must lie in (0,1]");
    check(train.batch_size >= 1, "train.batch_size must be >= 1");
    check(train.pretrain_steps >= 0, "train.pretrain_steps must be >= 0");
    check(train.meta_steps >= 0, "train.meta_steps must be >= 0");
    check(train.episodes_per_step >= 1, "train.episodes_per_step must be >= 1");
    check(train.support_n >= 1 && train.support_n <= 16,
          "train.support_n must lie in [1,16]");
    check(train.query_n >= 1, "train.query_n must be >= 1");
    check(train.matching_heads >= 1, "train.matching_heads must be >= 1");
    for (int m : backbone.channel_multipliers)
        check(backbone.base_channels * m % train.matching_heads == 0,
              "train.matching_heads must divide every level width");
    check(train.log_every >= 1, "train.log_every must be >= 1");
    check(finetune.lr > 0, "finetune.lr must be positive");
    check(finetune.max_steps >= 1, "finetune.max_steps must be >= 1");
    check(finetune.batch_size >= 1, "finetune.batch_size must be >= 1");
    check(finetune.eval_every >= 1, "finetune.eval_every must be >= 1");
    check(finetune.patience >= 1, "finetune.patience must be >= 1");
    check(inference.steps >= 1 && inference.steps <= schedule.timesteps,
          "inference.steps must lie in [1, schedule.timesteps]");
    check(inference.cfg_scale >= 0, "inference.cfg_scale must be >= 0");
    check(inference.support_pairs >= 1 && inference.support_pairs <= 16,
          "inference.support_pairs must lie in [1,16]");
    check(!paths.data_dir.empty(), "paths.data_dir must not be empty");
    check(!paths.ckpt_dir.empty(), "paths.ckpt_dir must not be empty");
    check(!paths.out_dir.empty(), "paths.out_dir must not be empty");
}

std::string config_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig parse_config_text(const std::string& json_text) {
    json user = json::parse(json_text, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config is not valid JSON");
    json base = to_json(RunConfig{});
    merge_strict(base, user, "");
    return from_json(base);
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json base = to_json(RunConfig{});
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        json user = json::parse(in, nullptr, false);
        if (user.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
        merge_strict(base, user, "");
    }
    for (const std::string& kv : overrides) apply_override(base, kv);
    RunConfig cfg = from_json(base);
    cfg.validate();
    return cfg;
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

std::string section_hash(const RunConfig& cfg, const std::string& section) {
    json j = to_json(cfg);
    if (!j.contains(section)) throw ConfigError("unknown config section: " + section);
    return sha256_hex(j.at(section).dump());
}

}  // namespace fsc

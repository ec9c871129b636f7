#include "fsc/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fsc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian raw float32");

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void write_raw(const std::string& path, const Tensor<float>& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open for write: " + path);
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * 4));
    if (!out) throw DataError("checkpoint: short write: " + path);
}

void read_raw(const std::string& path, Tensor<float>& t) {
    std::error_code ec;
    auto sz = fs::file_size(path, ec);
    if (ec) throw DataError("checkpoint: missing tensor file: " + path);
    if (sz != uint64_t(t.numel()) * 4)
        throw DataError("checkpoint: size mismatch for " + path + ": file " + std::to_string(sz) +
                        " bytes, tensor wants " + std::to_string(t.numel() * 4));
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * 4));
    if (in.gcount() != std::streamsize(t.numel() * 4))
        throw DataError("checkpoint: short read: " + path);
}

std::string file_id(const char* prefix, int idx) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%06d.bin", prefix, idx);
    return buf;
}

}  // namespace

void save_checkpoint(const std::string& dir, const ParamStore<float>& store,
                     const CheckpointMeta& meta, const AdamW* opt) {
    fs::path tmp = fs::path(dir).concat(".tmp");
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    json man;
    man["format_version"] = meta.format_version;
    man["config_hash"] = meta.config_hash;
    man["stage"] = meta.stage;
    man["provenance"] = meta.provenance;
    if (opt) {
        man["optimizer"] = {{"lr", opt->lr},
                            {"weight_decay", opt->weight_decay},
                            {"beta1", opt->beta1},
                            {"beta2", opt->beta2},
                            {"eps", opt->eps}};
    }
    json parts = json::array();
    int idx = 0;
    for (const std::string& part : store.order) {
        json tensors = json::array();
        for (const Param<float>* p : store.partition(part)) {
            json t;
            t["name"] = p->name;
            t["shape"] = p->value.shape;
            t["dtype"] = "f32";
            t["file"] = file_id("t", idx);
            write_raw((tmp / t["file"].get<std::string>()).string(), p->value);
            if (opt) {
                auto it = opt->state.find(p->name);
                if (it != opt->state.end() && !it->second.m.empty()) {
                    t["adam"] = {{"file_m", file_id("m", idx)},
                                 {"file_v", file_id("v", idx)},
                                 {"steps", it->second.steps}};
                    write_raw((tmp / file_id("m", idx)).string(), it->second.m);
                    write_raw((tmp / file_id("v", idx)).string(), it->second.v);
                }
            }
            tensors.push_back(std::move(t));
            ++idx;
        }
        parts.push_back(json{{"name", part}, {"tensors", std::move(tensors)}});
    }
    man["partitions"] = std::move(parts);
    {
        std::ofstream out(tmp / "manifest.json", std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot write manifest in " + tmp.string());
        out << man.dump(2) << "\n";
    }
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

namespace {

json read_manifest(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("checkpoint: missing manifest.json in " + dir);
    json man = json::parse(in, nullptr, false);
    if (man.is_discarded()) throw DataError("checkpoint: corrupt manifest in " + dir);
    return man;
}

CheckpointMeta meta_of(const json& man) {
    CheckpointMeta meta;
    try {
        meta.format_version = man.at("format_version").get<int>();
        meta.config_hash = man.at("config_hash").get<std::string>();
        meta.stage = man.at("stage").get<std::string>();
        if (man.contains("provenance"))
            meta.provenance = man.at("provenance").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: manifest field error: ") + e.what());
    }
    if (meta.format_version != 1)
        throw DataError("checkpoint: unsupported format version " +
                        std::to_string(meta.format_version));
    return meta;
}

}  // namespace

CheckpointMeta load_checkpoint(const std::string& dir, const ParamStore<float>& store,
                               AdamW* opt) {
    json man = read_manifest(dir);
    CheckpointMeta meta = meta_of(man);
    std::map<std::string, Param<float>*> by_name;
    for (Param<float>* p : store.all()) by_name[p->name] = p;
    size_t loaded = 0;
    try {
        for (const json& part : man.at("partitions")) {
            std::string pname = part.at("name").get<std::string>();
            if (!store.has(pname))
                throw DataError("checkpoint: partition not in model: " + pname);
            for (const json& t : part.at("tensors")) {
                std::string name = t.at("name").get<std::string>();
                auto it = by_name.find(name);
                if (it == by_name.end())
                    throw DataError("checkpoint: tensor not in model: " + name);
                Param<float>* p = it->second;
                std::vector<int> shape = t.at("shape").get<std::vector<int>>();
                if (shape != p->value.shape)
                    throw DataError("checkpoint: shape mismatch for " + name);
                if (t.at("dtype").get<std::string>() != "f32")
                    throw DataError("checkpoint: unsupported dtype for " + name);
                read_raw((fs::path(dir) / t.at("file").get<std::string>()).string(), p->value);
                ++loaded;
                if (opt && t.contains("adam")) {
                    AdamState& st = opt->state[name];
                    st.m = Tensor<float>::zeros(p->value.shape);
                    st.v = Tensor<float>::zeros(p->value.shape);
                    read_raw((fs::path(dir) / t.at("adam").at("file_m").get<std::string>()).string(),
                             st.m);
                    read_raw((fs::path(dir) / t.at("adam").at("file_v").get<std::string>()).string(),
                             st.v);
                    st.steps = t.at("adam").at("steps").get<int64_t>();
                }
            }
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: manifest field error: ") + e.what());
    }
    if (loaded != by_name.size())
        throw DataError("checkpoint: covers " + std::to_string(loaded) + " tensors, model has " +
                        std::to_string(by_name.size()));
    return meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& dir) {
    return meta_of(read_manifest(dir));
}

std::vector<PartitionSummary> checkpoint_partitions(const std::string& dir) {
    json man = read_manifest(dir);
    meta_of(man);  // format/version validation
    std::vector<PartitionSummary> out;
    try {
        for (const json& part : man.at("partitions")) {
            PartitionSummary ps;
            ps.name = part.at("name").get<std::string>();
            for (const json& tj : part.at("tensors")) {
                int64_t n = 1;
                for (int64_t d : tj.at("shape").get<std::vector<int64_t>>()) n *= d;
                ps.params += n;
                ++ps.tensors;
            }
            out.push_back(std::move(ps));
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: manifest field error: ") + e.what());
    }
    return out;
}

}  // namespace fsc

#pragma once

// Named, partitioned registry of parameter pointers. Partitions mirror the
// trainable surface of each stage (backbone / image_encoder / cond_shared /
// task_bias/<task> / matching / projections) and are the unit of freezing,
// checkpointing, and update audits.

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "fsc/digest.hpp"
#include "fsc/tape.hpp"

namespace fsc {

template <typename S>
struct ParamStore {
    // insertion-ordered partitions of insertion-ordered params
    std::vector<std::string> order;
    std::map<std::string, std::vector<Param<S>*>> parts;

    void add(const std::string& part, Param<S>* p) {
        auto it = parts.find(part);
        if (it == parts.end()) {
            order.push_back(part);
            parts[part] = {p};
        } else {
            it->second.push_back(p);
        }
    }

    std::vector<Param<S>*>& partition(const std::string& part) {
        auto it = parts.find(part);
        FSC_CHECK(it != parts.end(), "unknown partition " + part);
        return it->second;
    }
    const std::vector<Param<S>*>& partition(const std::string& part) const {
        auto it = parts.find(part);
        FSC_CHECK(it != parts.end(), "unknown partition " + part);
        return it->second;
    }
    bool has(const std::string& part) const { return parts.count(part) != 0; }

    int64_t count(const std::string& part) const {
        int64_t n = 0;
        for (const Param<S>* p : partition(part)) n += p->value.numel();
        return n;
    }
    int64_t count_all() const {
        int64_t n = 0;
        for (const auto& name : order) n += count(name);
        return n;
    }

    void set_trainable(const std::string& part, bool trainable) {
        for (Param<S>* p : partition(part)) p->trainable = trainable;
    }

    std::vector<Param<S>*> all() const {
        std::vector<Param<S>*> out;
        for (const auto& name : order)
            for (Param<S>* p : parts.at(name)) out.push_back(p);
        return out;
    }

    // content digest of a partition's values, for bit-exact update audits
    std::string digest(const std::string& part) const {
        Sha256 h;
        for (const Param<S>* p : partition(part))
            h.update(reinterpret_cast<const uint8_t*>(p->value.data()),
                     size_t(p->value.numel()) * sizeof(S));
        return h.hex();
    }

    std::map<std::string, std::string> digest_all() const {
        std::map<std::string, std::string> out;
        for (const auto& name : order) out[name] = digest(name);
        return out;
    }
};

}  // namespace fsc

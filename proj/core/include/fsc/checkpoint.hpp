#pragma once

// Checkpoint container: a directory holding manifest.json (format version,
// config hash, stage provenance, partition list with tensor names, shapes,
// dtypes, and file mappings) plus one raw little-endian float32 binary per
// tensor, row-major. Writes go to a temp directory renamed into place;
// round-trips are bit-exact.

#include <map>
#include <string>

#include "fsc/optim.hpp"
#include "fsc/params.hpp"

namespace fsc {

struct CheckpointMeta {
    int format_version = 1;
    std::string config_hash;
    std::string stage;  // pretrain | meta | finetune | ablation tag
    std::map<std::string, std::string> provenance;  // free-form stage notes
};

// per-partition size summary straight from the manifest (no tensor reads)
struct PartitionSummary {
    std::string name;
    int tensors = 0;
    int64_t params = 0;
};

// Serialize every partition of `store`, optionally with optimizer moments.
void save_checkpoint(const std::string& dir, const ParamStore<float>& store,
                     const CheckpointMeta& meta, const AdamW* opt = nullptr);

// Load values into an already-constructed store with identical partition and
// tensor layout. Restores optimizer moments when `opt` is given and the
// checkpoint carries them. DataError on missing files, shape or coverage
// mismatches, or a corrupt manifest.
CheckpointMeta load_checkpoint(const std::string& dir, const ParamStore<float>& store,
                               AdamW* opt = nullptr);

// Manifest-only read (stage, hash, provenance) without touching tensors.
CheckpointMeta read_checkpoint_meta(const std::string& dir);

std::vector<PartitionSummary> checkpoint_partitions(const std::string& dir);

}  // namespace fsc

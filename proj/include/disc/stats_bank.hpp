#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "disc/model.hpp"

namespace disc {

struct SnapshotEntry {
    std::string layer_key;  // e.g. "block0.bn"
    std::uint32_t channels = 0;
    std::vector<float> mean;
    std::vector<float> var;
};

struct SnapshotMeta {
    std::uint32_t adapt_batches = 0;
    std::string note;
};

// One task's frozen BN statistics plus the fingerprint of the model they
// belong to. Holds copies; the affine BN parameters stay with the model.
struct StatsSnapshot {
    std::string task_id;
    std::vector<SnapshotEntry> entries;
    std::uint64_t model_fingerprint = 0;
    SnapshotMeta meta;
};

// task_id -> snapshot, all captured from the same frozen model.
class StatsBank {
public:
    void add(StatsSnapshot snapshot);
    const StatsSnapshot* find(const std::string& task_id) const;
    const StatsSnapshot& at(const std::string& task_id) const;
    const std::vector<StatsSnapshot>& snapshots() const { return snapshots_; }
    std::size_t size() const { return snapshots_.size(); }
    bool empty() const { return snapshots_.empty(); }
    std::uint64_t fingerprint() const { return fingerprint_; }

private:
    std::vector<StatsSnapshot> snapshots_;  // insertion order preserved
    std::uint64_t fingerprint_ = 0;
};

// Copies every BN layer's running statistics out of the model.
StatsSnapshot capture(const Model& m, const std::string& task_id, SnapshotMeta meta = {});

// Replaces ONLY the BN running statistics; every other parameter stays
// bit-identical. Guards against snapshots from a different model.
void plug(Model& m, const StatsSnapshot& snapshot);

// Bank file: magic "DISCSTAT", version u16, fingerprint u64, snapshot count
// u16, then per snapshot: task_id (u16 length-prefixed UTF-8), entry count
// u16, per entry (layer_key u16-prefixed, channels u32, mean f32 LE array,
// var f32 LE array), meta (adapt_batches u32, note u16-prefixed).
// Round trips are bit-exact.
std::vector<char> serialize_bank(const StatsBank& bank);
void save_bank(const StatsBank& bank, const std::string& path);
StatsBank load_bank(const std::string& path);

}  // namespace disc

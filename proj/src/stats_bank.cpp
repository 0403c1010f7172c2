#include "disc/stats_bank.hpp"

#include "disc/serialize.hpp"

namespace disc {

namespace {
constexpr char kMagic[9] = "DISCSTAT";
constexpr std::uint16_t kVersion = 1;
}  // namespace

void StatsBank::add(StatsSnapshot snapshot) {
    if (find(snapshot.task_id))
        throw DataError("stats bank already holds task '" + snapshot.task_id + "'");
    if (!snapshots_.empty() && snapshot.model_fingerprint != fingerprint_)
        throw WrongModelError("snapshot fingerprint does not match the bank's model");
    if (snapshots_.empty()) fingerprint_ = snapshot.model_fingerprint;
    snapshots_.push_back(std::move(snapshot));
}

const StatsSnapshot* StatsBank::find(const std::string& task_id) const {
    for (const auto& s : snapshots_)
        if (s.task_id == task_id) return &s;
    return nullptr;
}

const StatsSnapshot& StatsBank::at(const std::string& task_id) const {
    const StatsSnapshot* s = find(task_id);
    if (!s) throw ProtocolError("stats bank has no snapshot for task '" + task_id + "'");
    return *s;
}

StatsSnapshot capture(const Model& m, const std::string& task_id, SnapshotMeta meta) {
    if (m.blocks.empty()) throw StructureError("capture: model has no batch normalization layers");
    StatsSnapshot snap;
    snap.task_id = task_id;
    snap.meta = std::move(meta);
    snap.model_fingerprint = m.param_fingerprint();
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        SnapshotEntry e;
        e.layer_key = m.block_key(i) + ".bn";
        e.channels = static_cast<std::uint32_t>(m.blocks[i].bn.channels);
        e.mean = m.blocks[i].bn.running_mean;
        e.var = m.blocks[i].bn.running_var;
        for (float v : e.var)
            if (v < 0.0f) throw DataError("capture: negative running variance in " + e.layer_key);
        snap.entries.push_back(std::move(e));
    }
    return snap;
}

void plug(Model& m, const StatsSnapshot& snapshot) {
    if (snapshot.model_fingerprint != m.param_fingerprint())
        throw WrongModelError("plug: snapshot was captured from a different model");
    if (snapshot.entries.size() != m.blocks.size())
        throw StructureError("plug: snapshot has " + std::to_string(snapshot.entries.size()) +
                             " entries, model has " + std::to_string(m.blocks.size()) +
                             " BN layers");
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const SnapshotEntry& e = snapshot.entries[i];
        const std::string want = m.block_key(i) + ".bn";
        if (e.layer_key != want)
            throw StructureError("plug: entry key '" + e.layer_key + "' does not match '" + want + "'");
        if (e.channels != static_cast<std::uint32_t>(m.blocks[i].bn.channels))
            throw StructureError("plug: channel mismatch at " + e.layer_key);
        m.blocks[i].bn.running_mean = e.mean;
        m.blocks[i].bn.running_var = e.var;
    }
}

std::vector<char> serialize_bank(const StatsBank& bank) {
    ByteWriter w;
    w.bytes(kMagic, 8);
    w.u16(kVersion);
    w.u64(bank.fingerprint());
    w.u16(static_cast<std::uint16_t>(bank.size()));
    for (const StatsSnapshot& s : bank.snapshots()) {
        w.str16(s.task_id);
        w.u16(static_cast<std::uint16_t>(s.entries.size()));
        for (const SnapshotEntry& e : s.entries) {
            w.str16(e.layer_key);
            w.u32(e.channels);
            w.f32_array(e.mean);
            w.f32_array(e.var);
        }
        w.u32(s.meta.adapt_batches);
        w.str16(s.meta.note);
    }
    return w.buffer();
}

void save_bank(const StatsBank& bank, const std::string& path) {
    ByteWriter w;
    auto buf = serialize_bank(bank);
    w.bytes(buf.data(), buf.size());
    w.write_file(path);
}

StatsBank load_bank(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    r.expect_magic(kMagic);
    const std::uint16_t version = r.u16();
    if (version != kVersion) r.fail("unsupported bank version " + std::to_string(version));
    const std::uint64_t fingerprint = r.u64();
    const std::uint16_t count = r.u16();
    StatsBank bank;
    for (std::uint16_t i = 0; i < count; ++i) {
        StatsSnapshot s;
        s.task_id = r.str16();
        s.model_fingerprint = fingerprint;
        const std::uint16_t entries = r.u16();
        for (std::uint16_t j = 0; j < entries; ++j) {
            SnapshotEntry e;
            e.layer_key = r.str16();
            e.channels = r.u32();
            if (e.channels == 0 || e.channels > (1u << 20)) r.fail("implausible channel count");
            e.mean = r.f32_array(e.channels);
            e.var = r.f32_array(e.channels);
            for (float v : e.var)
                if (v < 0.0f) r.fail("negative variance in " + e.layer_key);
            s.entries.push_back(std::move(e));
        }
        s.meta.adapt_batches = r.u32();
        s.meta.note = r.str16();
        bank.add(std::move(s));
    }
    r.require_end();
    return bank;
}

}  // namespace disc

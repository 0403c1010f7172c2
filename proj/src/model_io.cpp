#include "disc/model_io.hpp"

namespace disc {

namespace {

constexpr char kMagic[9] = "DISCMODL";
constexpr std::uint16_t kVersion = 1;

// Every persisted array in topological key order: parameters and BN buffers
// interleaved per layer.
template <typename ModelLike, typename Fn>
void for_each_record(ModelLike& m, Fn&& fn) {
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string b = m.block_key(i);
        fn(b + ".conv.weight", m.blocks[i].conv.weight);
        fn(b + ".conv.bias", m.blocks[i].conv.bias);
        fn(b + ".bn.gamma", m.blocks[i].bn.gamma);
        fn(b + ".bn.beta", m.blocks[i].bn.beta);
        fn(b + ".bn.running_mean", m.blocks[i].bn.running_mean);
        fn(b + ".bn.running_var", m.blocks[i].bn.running_var);
    }
    fn("head.weight", m.head.weight);
    fn("head.bias", m.head.bias);
}

}  // namespace

std::vector<char> serialize_model(const Model& m) {
    ByteWriter w;
    w.bytes(kMagic, 8);
    w.u16(kVersion);
    const ModelConfig& c = m.config;
    w.u32(static_cast<std::uint32_t>(c.in_channels));
    w.u32(static_cast<std::uint32_t>(c.in_height));
    w.u32(static_cast<std::uint32_t>(c.in_width));
    w.u32(static_cast<std::uint32_t>(c.blocks.size()));
    for (const ConvBlockSpec& b : c.blocks) {
        w.u32(static_cast<std::uint32_t>(b.out_channels));
        w.u32(static_cast<std::uint32_t>(b.kernel));
        w.u32(static_cast<std::uint32_t>(b.stride));
        w.u32(static_cast<std::uint32_t>(b.pad));
        w.u8(b.pool ? 1 : 0);
    }
    w.u32(static_cast<std::uint32_t>(c.head_width));
    w.u32(static_cast<std::uint32_t>(c.n_classes));
    w.u64(c.seed);
    for_each_record(m, [&](const std::string& key, const std::vector<float>& v) {
        w.str16(key);
        w.u64(v.size());
        w.f32_array(v);
    });
    return w.buffer();
}

void save_model(const Model& m, const std::string& path) {
    ByteWriter w;
    auto buf = serialize_model(m);
    w.bytes(buf.data(), buf.size());
    w.write_file(path);
}

Model deserialize_model(ByteReader& r) {
    r.expect_magic(kMagic);
    const std::uint16_t version = r.u16();
    if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));

    ModelConfig c;
    c.in_channels = static_cast<int>(r.u32());
    c.in_height = static_cast<int>(r.u32());
    c.in_width = static_cast<int>(r.u32());
    const std::uint32_t n_blocks = r.u32();
    if (n_blocks == 0 || n_blocks > 64) r.fail("implausible block count");
    c.blocks.clear();
    for (std::uint32_t i = 0; i < n_blocks; ++i) {
        ConvBlockSpec b;
        b.out_channels = static_cast<int>(r.u32());
        b.kernel = static_cast<int>(r.u32());
        b.stride = static_cast<int>(r.u32());
        b.pad = static_cast<int>(r.u32());
        b.pool = r.u8() != 0;
        c.blocks.push_back(b);
    }
    c.head_width = static_cast<int>(r.u32());
    c.n_classes = static_cast<int>(r.u32());
    c.seed = r.u64();
    c.validate();

    Model m = build_model<float>(c);
    for_each_record(m, [&](const std::string& key, std::vector<float>& v) {
        const std::string got = r.str16();
        if (got != key) r.fail("unexpected record key '" + got + "', wanted '" + key + "'");
        const std::uint64_t count = r.u64();
        if (count != v.size())
            r.fail("record '" + key + "' has " + std::to_string(count) + " elements, wanted " +
                   std::to_string(v.size()));
        v = r.f32_array(static_cast<std::size_t>(count));
    });
    r.require_end();
    m.set_mode(Mode::eval);
    return m;
}

Model load_model(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    return deserialize_model(r);
}

}  // namespace disc

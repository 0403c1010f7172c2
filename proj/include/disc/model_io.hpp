#pragma once

#include <string>
#include <vector>

#include "disc/model.hpp"
#include "disc/serialize.hpp"

namespace disc {

// Checkpoint layout: magic "DISCMODL", version u16, config block, then
// parameters and BN buffers in layer-key order, each record as
// (key length u16, key bytes, element count u64, f32 little-endian array).
// Round trips are bit-exact.

std::vector<char> serialize_model(const Model& m);
void save_model(const Model& m, const std::string& path);
Model deserialize_model(ByteReader& r);
Model load_model(const std::string& path);

}  // namespace disc

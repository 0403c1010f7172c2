#include "disc/serialize.hpp"

#include <fstream>

namespace disc {

void ByteWriter::write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw DataError("write failed: " + path);
}

ByteReader ByteReader::from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("cannot open for reading: " + path);
    std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(n));
    f.read(buf.data(), n);
    if (!f) throw DataError("read failed: " + path);
    return ByteReader(std::move(buf));
}

}  // namespace disc

#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "disc/errors.hpp"

namespace disc {

// 64-bit FNV-1a; the model fingerprint hash.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ull;
};

// Little-endian binary writer backed by an in-memory buffer.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { raw_le(&v, 2); }
    void u32(std::uint32_t v) { raw_le(&v, 4); }
    void u64(std::uint64_t v) { raw_le(&v, 8); }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f32_array(const float* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(data[i]);
    }
    void f32_array(const std::vector<float>& v) { f32_array(v.data(), v.size()); }
    void bytes(const void* data, std::size_t n) {
        const char* p = static_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    // length-prefixed UTF-8 (u16 length)
    void str16(const std::string& s) {
        if (s.size() > 0xffff) throw DataError("string too long for u16 length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }

    const std::vector<char>& buffer() const { return buf_; }
    std::size_t size() const { return buf_.size(); }
    void write_file(const std::string& path) const;

private:
    void raw_le(const void* v, std::size_t n) {
        // host is little-endian on every supported target; serialize verbatim
        bytes(v, n);
    }
    std::vector<char> buf_;
};

// Little-endian reader; tracks the byte offset for format errors.
class ByteReader {
public:
    explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}
    static ByteReader from_file(const std::string& path);

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint16_t u16() { return read_le<std::uint16_t>(); }
    std::uint32_t u32() { return read_le<std::uint32_t>(); }
    std::uint64_t u64() { return read_le<std::uint64_t>(); }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::vector<float> f32_array(std::size_t n) {
        std::vector<float> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = f32();
        return out;
    }
    std::string str16() {
        std::size_t n = u16();
        const char* p = take(n);
        return std::string(p, n);
    }
    void expect_magic(const char (&magic)[9]) {
        std::uint64_t at = pos_;
        const char* p = take(8);
        if (std::memcmp(p, magic, 8) != 0) throw FormatError("bad magic", at);
    }

    std::uint64_t pos() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }
    void require_end() const {
        if (!at_end()) throw FormatError("trailing bytes after payload", pos_);
    }
    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(msg, pos_); }

private:
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size()) throw FormatError("truncated file", pos_);
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    template <typename T>
    T read_le() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }

    std::vector<char> buf_;
    std::uint64_t pos_ = 0;
};

}  // namespace disc

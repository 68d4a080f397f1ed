#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian buffer primitives and CRC-32 (IEEE) used by every on-disk
// and on-wire format in the project.

namespace forla {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(uint8_t(v >> (8 * i)));
}

inline void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(uint8_t(v >> (8 * i)));
}

inline void put_f32(std::vector<uint8_t>& b, float v) { put_u32(b, std::bit_cast<uint32_t>(v)); }

inline void put_bytes(std::vector<uint8_t>& b, const void* p, size_t n) {
    const uint8_t* s = static_cast<const uint8_t*>(p);
    b.insert(b.end(), s, s + n);
}

class Reader {
public:
    Reader(const uint8_t* data, size_t size) : p_(data), n_(size) {}
    explicit Reader(const std::vector<uint8_t>& b) : Reader(b.data(), b.size()) {}

    size_t offset() const { return off_; }
    size_t remaining() const { return n_ - off_; }

    void need(size_t n) const {
        if (off_ + n > n_) throw IoError("unexpected end of data at byte " + std::to_string(off_));
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p_[off_ + i]) << (8 * i);
        off_ += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p_[off_ + i]) << (8 * i);
        off_ += 8;
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    void bytes(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, p_ + off_, n);
        off_ += n;
    }

    std::string tag(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + off_), n);
        off_ += n;
        return s;
    }

private:
    const uint8_t* p_;
    size_t n_;
    size_t off_ = 0;
};

inline const std::array<uint32_t, 256>& crc32_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

inline uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0) {
    uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto& t = crc32_table();
    for (size_t i = 0; i < n; ++i) c = t[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline uint32_t crc32(const std::vector<uint8_t>& b) { return crc32(b.data(), b.size()); }

}  // namespace io
}  // namespace forla

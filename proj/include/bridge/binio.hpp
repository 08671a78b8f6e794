#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "bridge/errors.hpp"

namespace bridge::binio {

// Little-endian primitives regardless of host byte order.
void put_u32(std::vector<uint8_t>& buf, uint32_t v);
void put_u64(std::vector<uint8_t>& buf, uint64_t v);
void put_f32(std::vector<uint8_t>& buf, float v);
void put_string(std::vector<uint8_t>& buf, const std::string& s);

class Reader {
public:
    Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}
    uint32_t u32();
    uint64_t u64();
    float f32();
    std::string string();
    void bytes(uint8_t* out, size_t n);
    size_t pos() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }

private:
    void need(size_t n);
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
};

// CRC-32 (IEEE), the checksum used by checkpoint and dataset containers.
uint32_t crc32(const uint8_t* data, size_t size, uint32_t seed = 0);

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace bridge::binio

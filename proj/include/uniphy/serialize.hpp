#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "uniphy/errors.hpp"

namespace uniphy {

// Little-endian byte sink. Buffers are assembled in memory so trajectory
// blocks can be checksummed before hitting the file.
struct ByteWriter {
  std::vector<uint8_t> buf;

  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(uint8_t v) { buf.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
};

struct ByteReader {
  std::span<const uint8_t> data;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > data.size()) throw TruncatedError("unexpected end of file");
  }
  void bytes(void* p, size_t n) {
    need(n);
    std::memcpy(p, data.data() + pos, n);
    pos += n;
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

// CRC-32 (IEEE, reflected).
uint32_t crc32(std::span<const uint8_t> data);

std::vector<uint8_t> read_file_bytes(const std::string& path);   // throws IoError
void write_file_bytes(const std::string& path, std::span<const uint8_t> data);

}  // namespace uniphy

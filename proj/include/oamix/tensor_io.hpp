#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "oamix/errors.hpp"
#include "oamix/tensor.hpp"

namespace oamix {

// "OAT1" tensor file: magic bytes, u8 dtype tag (1 = f32, 2 = f64), u8 rank,
// rank x u32 little-endian dims, row-major payload little-endian.

namespace detail {

inline void put_u32_le(std::string& buf, uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

template <class T>
constexpr uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
void put_scalar_le(std::string& buf, T v) {
  if constexpr (std::is_same_v<T, float>) {
    uint32_t bits = std::bit_cast<uint32_t>(v);
    put_u32_le(buf, bits);
  } else {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    put_u32_le(buf, static_cast<uint32_t>(bits & 0xffffffffull));
    put_u32_le(buf, static_cast<uint32_t>(bits >> 32));
  }
}

template <class T>
T get_scalar_le(const unsigned char* p) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(get_u32_le(p));
  } else {
    uint64_t lo = get_u32_le(p);
    uint64_t hi = get_u32_le(p + 4);
    return std::bit_cast<double>(lo | (hi << 32));
  }
}

}  // namespace detail

template <class T>
std::string encode_oat1(const Tensor<T>& t) {
  std::string buf;
  buf.reserve(6 + 4 * t.shape().size() + sizeof(T) * static_cast<size_t>(t.numel()));
  buf += "OAT1";
  buf.push_back(static_cast<char>(detail::dtype_tag<T>()));
  buf.push_back(static_cast<char>(t.rank()));
  for (int64_t d : t.shape()) detail::put_u32_le(buf, static_cast<uint32_t>(d));
  for (T v : t.values()) detail::put_scalar_le(buf, v);
  return buf;
}

template <class T>
Tensor<T> decode_oat1(const std::string& buf, const std::string& what = "tensor") {
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 6 || std::memcmp(p, "OAT1", 4) != 0)
    throw FormatError(what + ": bad OAT1 magic");
  uint8_t tag = p[4];
  if (tag != detail::dtype_tag<T>())
    throw FormatError(what + ": dtype tag " + std::to_string(tag) + " does not match requested type");
  uint8_t rank = p[5];
  size_t off = 6;
  if (buf.size() < off + 4u * rank) throw FormatError(what + ": truncated OAT1 header");
  Shape shape(rank);
  for (uint8_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_u32_le(p + off);
    off += 4;
  }
  int64_t n = numel_of(shape);
  if (buf.size() != off + sizeof(T) * static_cast<size_t>(n))
    throw FormatError(what + ": payload size mismatch");
  std::vector<T> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    data[static_cast<size_t>(i)] = detail::get_scalar_le<T>(p + off);
    off += sizeof(T);
  }
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <class T>
void save_oat1(const std::string& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  std::string buf = encode_oat1(t);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError("write failed for " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return buf;
}

template <class T>
Tensor<T> load_oat1(const std::string& path) {
  return decode_oat1<T>(read_file_bytes(path), path);
}

}  // namespace oamix

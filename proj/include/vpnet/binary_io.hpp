#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "vpnet/error.hpp"

namespace vpnet::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out{};
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  }
  return v;
}

template <typename U>
void write_le(std::ostream& os, U v) {
  const U le = to_little(v);
  os.write(reinterpret_cast<const char*>(&le), sizeof(U));
}

inline void write_f32(std::ostream& os, float f) { write_le(os, std::bit_cast<std::uint32_t>(f)); }

template <typename U>
U read_le(std::istream& is, const std::string& what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError(what + ": truncated");
  return to_little(v);
}

inline float read_f32(std::istream& is, const std::string& what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(is, what));
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char buf[4]{};
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw FormatError(what + ": bad magic, expected " + std::string(magic));
  }
}

}  // namespace vpnet::io

#pragma once
// Little-endian primitive readers/writers shared by the SNLD and SNLM formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "snl/error.hpp"

namespace snl::io {

template <class T>
T byteswap_if_big(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
void write(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void write_array(std::ostream& os, const T* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  } else {
    for (std::size_t i = 0; i < n; ++i) write(os, data[i]);
  }
}

inline void write_string(std::ostream& os, const std::string& s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T read(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("truncated file");
  return byteswap_if_big(v);
}

template <class T>
void read_array(std::istream& is, T* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw FormatError("truncated file");
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
    for (std::size_t i = 0; i < n; ++i) data[i] = byteswap_if_big(data[i]);
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 24) {
  const auto len = read<std::uint32_t>(is);
  if (len > max_len) throw FormatError("string length out of range");
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("truncated file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4]{};
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace snl::io

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vg/error.hpp"

// Little-endian binary file helpers. All on-disk formats in this project
// are little-endian with explicit magic strings and versions.

namespace vg::io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  check_data(static_cast<size_t>(is.gcount()) == n, std::string("truncated file while reading ") + what);
}

template <class T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_bytes(os, &v, sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  read_bytes(is, &v, sizeof(T), what);
  return v;
}

inline void write_magic(std::ostream& os, const char (&magic)[9]) { write_bytes(os, magic, 8); }

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& path) {
  char got[8];
  read_bytes(is, got, 8, "magic");
  check_data(std::memcmp(got, magic, 8) == 0, "bad magic in " + path);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const uint32_t n = read_pod<uint32_t>(is, "string length");
  check_data(n < (1u << 24), "unreasonable string length");
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n, "string body");
  return s;
}

inline std::ofstream open_write(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check_data(os.good(), "cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_data(is.good(), "cannot open for reading: " + path);
  return is;
}

}  // namespace vg::io

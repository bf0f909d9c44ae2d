#pragma once

// Little-endian primitive encoding shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "legs/errors.hpp"

namespace legs::bin {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw DataError("write failed");
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, &v, 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes(os, &v, 8); }
inline void put_f32(std::ostream& os, float v) { put_bytes(os, &v, 4); }

inline void put_f32s(std::ostream& os, std::span<const float> v) {
  put_bytes(os, v.data(), v.size() * sizeof(float));
}

/// Length-prefixed (u64) f32 array.
inline void put_f32_array(std::ostream& os, std::span<const float> v) {
  put_u64(os, v.size());
  put_f32s(os, v);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  put_bytes(os, s.data(), s.size());
}

/// Reader that names the file in every truncation error.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw DataError(what_ + ": unexpected end of file");
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }

  std::vector<float> f32s(std::size_t n) {
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }
  std::vector<float> f32_array(std::uint64_t max_count) {
    const std::uint64_t n = u64();
    if (n > max_count) throw DataError(what_ + ": array length " + std::to_string(n) + " too large");
    return f32s(n);
  }
  std::string string(std::uint64_t max_len = 1u << 26) {
    const std::uint64_t n = u64();
    if (n > max_len) throw DataError(what_ + ": string length too large");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  const std::string& what() const { return what_; }

 private:
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }

  std::istream& is_;
  std::string what_;
};

}  // namespace legs::bin

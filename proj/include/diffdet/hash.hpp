#pragma once

// Content hashing for provenance stamps (FNV-1a 64, hex) and payload
// integrity (CRC-32). Non-cryptographic on purpose: these guard against
// stale or bit-rotted artifacts, not adversaries.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace diffdet {

class Fnv1a64 {
 public:
  void update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 1099511628211ull;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t value() const { return state_; }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xf];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::string fnv1a64_hex(const void* bytes, std::size_t n) {
  Fnv1a64 h;
  h.update(bytes, n);
  return h.hex();
}

inline std::string fnv1a64_hex(const std::string& s) {
  return fnv1a64_hex(s.data(), s.size());
}

inline std::uint32_t crc32(const void* bytes, std::size_t n, std::uint32_t seed = 0) {
  static std::uint32_t table[256];
  static const bool init = [] {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    return true;
  }();
  (void)init;
  std::uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

}  // namespace diffdet

#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace cgpo {

// 64-bit FNV-1a. Used for content fingerprints, not for security.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }

  template <class T>
  Fnv1a& update(std::span<const T> values) {
    return update(values.data(), values.size_bytes());
  }

  std::uint64_t digest() const { return state_; }

  std::string hex() const { return to_hex(state_); }

  static std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) { return Fnv1a{}.update(s).digest(); }

}  // namespace cgpo

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dial {

// Contract violations (bad shapes, bad arguments, broken invariants). CLI exit 1.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures. CLI exit 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced by a tensor op.
struct NumericError : ContractError {
  using ContractError::ContractError;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string strcat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <typename... Args>
void check(bool cond, const Args&... args) {
  if (!cond) throw ContractError(strcat(args...));
}

template <typename... Args>
void check_io(bool cond, const Args&... args) {
  if (!cond) throw IoError(strcat(args...));
}

// FNV-1a, used for weight-buffer identity checks and cache keys.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace dial

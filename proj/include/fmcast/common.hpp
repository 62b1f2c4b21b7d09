// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fmcast {

enum class ErrorKind {
  Gap,
  Duplicate,
  Degenerate,
  Layout,
  Range,
  Format,
  Shape,
  Domain,
  NonFinite,
  Integration,
  Intervention,
  UndefinedAcc,
  Selection,
  Io,
  Config,
  Provenance,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Gap: return "gap";
    case ErrorKind::Duplicate: return "duplicate";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Layout: return "layout";
    case ErrorKind::Range: return "range";
    case ErrorKind::Format: return "format";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::Integration: return "integration";
    case ErrorKind::Intervention: return "intervention";
    case ErrorKind::UndefinedAcc: return "undefined-acc";
    case ErrorKind::Selection: return "selection";
    case ErrorKind::Io: return "io";
    case ErrorKind::Config: return "config";
    case ErrorKind::Provenance: return "provenance";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` discriminates the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <class... Args>
[[noreturn]] void fail(ErrorKind kind, const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw Error(kind, os.str());
}

// splitmix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive a stream seed from a master seed and an index. For a fixed master the
/// map index -> seed is injective over all 64-bit indices.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index,
                                    std::uint64_t domain = 0) noexcept {
  return mix64(mix64(master ^ mix64(domain)) + 0x9e3779b97f4a7c15ULL * (index + 1));
}

class Fnv1a {
 public:
  void update(const void* data, std::size_t len) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) noexcept { update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

/// Appends IEEE-754 binary32 values in little-endian byte order.
template <class It>
void put_f32_range(std::ostream& os, It first, It last) {
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<std::size_t>(std::distance(first, last)) * 4);
  for (; first != last; ++first) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(*first));
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

/// Reads exactly `count` binary32 values; returns the number actually read.
inline std::size_t get_f32(std::istream& is, std::vector<float>& out, std::size_t count) {
  std::vector<unsigned char> buf(count * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  const auto got = static_cast<std::size_t>(is.gcount()) / 4;
  out.resize(got);
  for (std::size_t k = 0; k < got; ++k) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(buf[4 * k + i]) << (8 * i);
    out[k] = std::bit_cast<float>(bits);
  }
  return got;
}

}  // namespace io

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace fmcast

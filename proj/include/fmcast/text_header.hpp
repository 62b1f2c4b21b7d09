// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fmcast/common.hpp"

namespace fmcast {

/// Ordered `key: value` lines used by every binary file header.
class TextHeader {
 public:
  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }
  template <class V>
  void set_num(std::string key, V value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(std::move(key), os.str());
  }

  std::optional<std::string> find(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    return std::nullopt;
  }
  const std::string& get(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    fail(ErrorKind::Format, "header key '", key, "' missing");
  }
  long long get_int(std::string_view key) const { return parse_int(get(key), key); }
  double get_double(std::string_view key) const { return parse_double(get(key), key); }

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + ": " + v + "\n";
    return out;
  }

  static TextHeader parse(std::string_view text) {
    TextHeader h;
    std::size_t start = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      const auto line = text.substr(start, end - start);
      start = end + 1;
      if (trim(line).empty()) continue;
      const auto colon = line.find(':');
      if (colon == std::string_view::npos) fail(ErrorKind::Format, "malformed header line '", line, "'");
      h.entries_.emplace_back(trim(line.substr(0, colon)), trim(line.substr(colon + 1)));
    }
    return h;
  }

  static long long parse_int(std::string_view s, std::string_view key = {}) {
    long long v = 0;
    const auto t = trim(s);
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size()) fail(ErrorKind::Format, "bad integer '", s, "' for ", key);
    return v;
  }
  static double parse_double(std::string_view s, std::string_view key = {}) {
    const auto t = trim(s);
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      fail(ErrorKind::Format, "bad number '", s, "' for ", key);
    }
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Writes magic, the length-prefixed header text; the caller appends the payload.
inline void write_preamble(std::ostream& os, std::string_view magic, const TextHeader& header) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const auto text = header.serialize();
  io::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline TextHeader read_preamble(std::istream& is, std::string_view magic, const std::string& path) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic)
    fail(ErrorKind::Format, path, ": bad magic (expected ", magic, ")");
  std::uint32_t len = 0;
  if (!io::get_u32(is, len)) fail(ErrorKind::Format, path, ": truncated header length");
  if (len > (64u << 20)) fail(ErrorKind::Format, path, ": implausible header length ", len);
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) fail(ErrorKind::Format, path, ": truncated header");
  return TextHeader::parse(text);
}

}  // namespace fmcast

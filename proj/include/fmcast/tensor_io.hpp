// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "fmcast/season.hpp"
#include "fmcast/text_header.hpp"

namespace fmcast {

inline constexpr std::string_view kTensorMagic = "FMCTNSR1";

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<int> parse_ints(std::string_view s) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  for (const auto& t : split(s, ',')) out.push_back(static_cast<int>(TextHeader::parse_int(t)));
  return out;
}

inline std::string serialize_calendar(const std::vector<MonthDay>& cal) {
  std::string out;
  char buf[8];
  for (std::size_t i = 0; i < cal.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%02d-%02d", cal[i].month, cal[i].day);
    out += (i ? "," : "") + std::string(buf);
  }
  return out;
}

inline std::vector<MonthDay> parse_calendar(std::string_view s) {
  std::vector<MonthDay> out;
  for (const auto& t : split(s, ',')) {
    const auto dash = t.find('-');
    if (dash == std::string::npos) fail(ErrorKind::Format, "bad calendar entry '", t, "'");
    const auto m = TextHeader::parse_int(t.substr(0, dash), "month");
    const auto d = TextHeader::parse_int(t.substr(dash + 1), "day");
    if (m < 1 || m > 12 || d < 1 || d > 31) fail(ErrorKind::Format, "bad calendar entry '", t, "'");
    out.push_back({static_cast<int>(m), static_cast<int>(d)});
  }
  return out;
}

/// Header lines shared by season tensors and ensembles.
inline void write_grid_layout(TextHeader& h, const GridSpec& grid, const ChannelLayout& layout) {
  layout.write(h);
  h.set("grid", grid.serialize());
}

template <class T>
TextHeader season_header(const Season<T>& s) {
  TextHeader h;
  h.set("year", std::to_string(s.year));
  h.set("season_length", std::to_string(s.days()));
  write_grid_layout(h, s.grid, s.layout);
  h.set("calendar", serialize_calendar(s.calendar));
  h.set("normalized", s.normalized ? "1" : "0");
  h.set("stats_fingerprint", s.stats_fingerprint.empty() ? "none" : s.stats_fingerprint);
  h.set("stats_years", join_ints(s.stats_years));
  h.set("payload", "f32le day,channel,lat,lon");
  return h;
}

/// Writes magic, header and the float32 payload. Extra header lines are merged in.
template <class T>
void save_tensor(const std::filesystem::path& path, const Season<T>& s, const TextHeader* extra = nullptr) {
  s.validate();
  TextHeader h = season_header(s);
  if (extra)
    for (const auto& [k, v] : extra->entries()) h.set(k, v);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  write_preamble(os, kTensorMagic, h);
  io::put_f32_range(os, s.values.vec().begin(), s.values.vec().end());
  if (!os) fail(ErrorKind::Io, "write failed for ", path.string());
}

/// Validates magic, declared shape, payload length and finiteness.
inline SeasonTensor load_tensor(const std::filesystem::path& path, TextHeader* header_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open ", path.string());
  const TextHeader h = read_preamble(is, kTensorMagic, path.string());
  SeasonTensor s;
  s.year = static_cast<int>(h.get_int("year"));
  const auto days = h.get_int("season_length");
  if (days <= 0) fail(ErrorKind::Format, path.string(), ": season_length must be positive");
  s.layout = ChannelLayout::read(h);
  s.grid = GridSpec::parse(h.get("grid"));
  s.calendar = parse_calendar(h.get("calendar"));
  if (s.calendar.size() != static_cast<std::size_t>(days))
    fail(ErrorKind::Shape, path.string(), ": calendar has ", s.calendar.size(), " days but header declares ", days);
  s.normalized = h.get("normalized") == "1";
  const auto fp = h.get("stats_fingerprint");
  s.stats_fingerprint = fp == "none" ? "" : fp;
  s.stats_years = parse_ints(h.get("stats_years"));

  const Shape4 shape{static_cast<std::size_t>(days), s.layout.size(), s.grid.n_lat, s.grid.n_lon};
  std::vector<float> payload;
  const auto got = io::get_f32(is, payload, shape.numel());
  if (got != shape.numel())
    fail(ErrorKind::Shape, path.string(), ": payload holds ", got, " values but header declares ", shape.numel(),
         " (", shape, ")");
  if (is.peek() != std::char_traits<char>::eof())
    fail(ErrorKind::Shape, path.string(), ": trailing bytes after declared payload");
  s.values = Tensor<float>(shape, std::move(payload));
  if (!s.values.all_finite()) fail(ErrorKind::NonFinite, path.string(), ": payload contains non-finite values");
  if (header_out) *header_out = h;
  return s;
}

}  // namespace fmcast

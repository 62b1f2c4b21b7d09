// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fmcast/common.hpp"
#include "fmcast/text_header.hpp"

namespace fmcast {

// ---------------------------------------------------------------------------
// Grid geometry

/// Regular lat-lon grid, periodic in longitude.
struct GridSpec {
  std::size_t n_lat = 16;
  std::size_t n_lon = 24;
  double lat_start_deg = 30.0;
  double lat_step_deg = 3.75;
  double lon_step_deg = 15.0;

  static GridSpec paper() { return {60, 90, 30.0, 1.0, 4.0}; }
  static GridSpec desk() { return {}; }
  /// n_lat rows starting at 30N with the given step, full-circle longitudes.
  static GridSpec regular(std::size_t n_lat, std::size_t n_lon, double lat_step = 3.75, double lat_start = 30.0) {
    return {n_lat, n_lon, lat_start, lat_step, 360.0 / static_cast<double>(n_lon)};
  }

  void validate() const {
    if (n_lat < 2) fail(ErrorKind::Shape, "grid needs at least 2 latitude rows, got ", n_lat);
    if (n_lon < 4) fail(ErrorKind::Shape, "grid needs at least 4 longitude columns, got ", n_lon);
    if (std::abs(static_cast<double>(n_lon) * lon_step_deg - 360.0) > 1e-9)
      fail(ErrorKind::Shape, "longitudes must cover exactly 360 degrees (", n_lon, " x ", lon_step_deg, ")");
    if (!(lat_step_deg > 0.0)) fail(ErrorKind::Shape, "latitude step must be positive");
  }

  double lat(std::size_t row) const noexcept { return lat_start_deg + lat_step_deg * static_cast<double>(row); }
  double lon(std::size_t col) const noexcept { return lon_step_deg * static_cast<double>(col); }

  /// Nearest row to `target_deg`; ties resolve to the lower index.
  std::size_t nearest_row(double target_deg) const noexcept {
    std::size_t best = 0;
    double best_d = std::abs(lat(0) - target_deg);
    for (std::size_t r = 1; r < n_lat; ++r) {
      const double d = std::abs(lat(r) - target_deg);
      if (d < best_d - 1e-12) {
        best = r;
        best_d = d;
      }
    }
    return best;
  }
  std::size_t diagnostic_row() const noexcept { return nearest_row(60.0); }
  std::size_t plane() const noexcept { return n_lat * n_lon; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;

  std::string serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_lat=" << n_lat << " n_lon=" << n_lon << " lat_start=" << lat_start_deg << " lat_step=" << lat_step_deg
       << " lon_step=" << lon_step_deg;
    return os.str();
  }
  static GridSpec parse(std::string_view text) {
    GridSpec g;
    for (const auto& tok : split(text, ' ')) {
      if (tok.empty()) continue;
      const auto eq = tok.find('=');
      if (eq == std::string::npos) fail(ErrorKind::Format, "bad grid token '", tok, "'");
      const auto key = tok.substr(0, eq);
      const auto val = tok.substr(eq + 1);
      if (key == "n_lat") g.n_lat = static_cast<std::size_t>(TextHeader::parse_int(val, key));
      else if (key == "n_lon") g.n_lon = static_cast<std::size_t>(TextHeader::parse_int(val, key));
      else if (key == "lat_start") g.lat_start_deg = TextHeader::parse_double(val, key);
      else if (key == "lat_step") g.lat_step_deg = TextHeader::parse_double(val, key);
      else if (key == "lon_step") g.lon_step_deg = TextHeader::parse_double(val, key);
      else fail(ErrorKind::Format, "unknown grid key '", key, "'");
    }
    g.validate();
    return g;
  }
};

// ---------------------------------------------------------------------------
// Channels

enum class Variable { U, V, T, Z, PV };

inline const char* variable_name(Variable v) {
  switch (v) {
    case Variable::U: return "u";
    case Variable::V: return "v";
    case Variable::T: return "T";
    case Variable::Z: return "Z";
    case Variable::PV: return "PV";
  }
  return "?";
}

inline Variable parse_variable(std::string_view s) {
  if (s == "u") return Variable::U;
  if (s == "v") return Variable::V;
  if (s == "T") return Variable::T;
  if (s == "Z") return Variable::Z;
  if (s == "PV") return Variable::PV;
  fail(ErrorKind::Layout, "unknown variable '", s, "'");
}

inline constexpr int kTroposphereLevels[] = {850, 500, 300, 200};
inline constexpr int kStratosphereLevels[] = {100, 70, 50, 10, 1};

struct Channel {
  Variable variable = Variable::U;
  int level_hpa = 10;
  bool sign_meaningful = true;
  bool troposphere_replaceable = false;

  static Channel make(Variable v, int level) {
    const bool sign = v == Variable::U || v == Variable::V || v == Variable::PV;
    const bool repl = (v == Variable::T || v == Variable::Z) && (level == 850 || level == 500);
    return {v, level, sign, repl};
  }
  /// Parses "u@10".
  static Channel parse(std::string_view name) {
    const auto at = name.find('@');
    if (at == std::string_view::npos) fail(ErrorKind::Layout, "channel '", name, "' must be <var>@<hPa>");
    return make(parse_variable(trim(name.substr(0, at))),
                static_cast<int>(TextHeader::parse_int(name.substr(at + 1), "level")));
  }

  std::string name() const { return std::string(variable_name(variable)) + "@" + std::to_string(level_hpa); }
  bool tropospheric() const noexcept { return level_hpa >= 200; }

  friend bool operator==(const Channel&, const Channel&) = default;
};

/// Ordered channel list. Canonical order: stratospheric block with variables
/// u, v, T, Z, PV and descending pressure within each, then tropospheric T, Z.
class ChannelLayout {
 public:
  ChannelLayout() = default;
  explicit ChannelLayout(std::vector<Channel> channels) : channels_(std::move(channels)) { validate(); }

  static ChannelLayout from_names(const std::vector<std::string>& names, bool canonicalize = true) {
    std::vector<Channel> ch;
    for (const auto& n : names) ch.push_back(Channel::parse(n));
    if (canonicalize) std::stable_sort(ch.begin(), ch.end(), canonical_less);
    return ChannelLayout(std::move(ch));
  }

  /// Full 33-channel layout.
  static ChannelLayout paper() {
    std::vector<Channel> ch;
    for (auto v : {Variable::U, Variable::V, Variable::T, Variable::Z, Variable::PV})
      for (int lvl : kStratosphereLevels) ch.push_back(Channel::make(v, lvl));
    for (auto v : {Variable::T, Variable::Z})
      for (int lvl : kTroposphereLevels) ch.push_back(Channel::make(v, lvl));
    return ChannelLayout(std::move(ch));
  }

  /// Six-channel layout: u and T at 10 hPa plus the replaceable tropospheric channels.
  static ChannelLayout desk() { return from_names({"u@10", "T@10", "T@850", "T@500", "Z@850", "Z@500"}); }

  static bool canonical_less(const Channel& a, const Channel& b) {
    const auto key = [](const Channel& c) {
      return std::tuple(c.tropospheric() ? 1 : 0, static_cast<int>(c.variable), -c.level_hpa);
    };
    return key(a) < key(b);
  }

  std::size_t size() const noexcept { return channels_.size(); }
  const Channel& operator[](std::size_t i) const noexcept { return channels_[i]; }
  const std::vector<Channel>& channels() const noexcept { return channels_; }
  auto begin() const noexcept { return channels_.begin(); }
  auto end() const noexcept { return channels_.end(); }

  std::optional<std::size_t> find(Variable v, int level) const {
    for (std::size_t i = 0; i < channels_.size(); ++i)
      if (channels_[i].variable == v && channels_[i].level_hpa == level) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < channels_.size(); ++i)
      if (channels_[i].name() == name) return i;
    return std::nullopt;
  }

  /// Index of the zonal-wind channel used for the vortex index.
  std::size_t diagnostic_u(int level_hpa = 10) const {
    if (auto i = find(Variable::U, level_hpa)) return *i;
    fail(ErrorKind::Layout, "layout has no u channel at ", level_hpa, " hPa");
  }

  /// The four channels overwritten in perfect-troposphere mode.
  std::vector<std::size_t> replaceable() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < channels_.size(); ++i)
      if (channels_[i].troposphere_replaceable) out.push_back(i);
    if (out.size() != 4)
      fail(ErrorKind::Layout, "perfect-troposphere mode needs T/Z at 850 and 500 hPa; layout has ", out.size(),
           " of them");
    return out;
  }

  std::string serialize_channel(std::size_t i) const {
    const auto& c = channels_[i];
    return c.name() + " sign=" + (c.sign_meaningful ? "1" : "0") + " trop=" + (c.troposphere_replaceable ? "1" : "0");
  }

  void write(TextHeader& h) const {
    h.set("channels", std::to_string(size()));
    for (std::size_t i = 0; i < size(); ++i) h.set("channel." + std::to_string(i), serialize_channel(i));
  }
  static ChannelLayout read(const TextHeader& h) {
    const auto n = h.get_int("channels");
    if (n <= 0) fail(ErrorKind::Format, "channel count must be positive");
    std::vector<Channel> ch;
    for (long long i = 0; i < n; ++i) {
      const auto parts = split(h.get("channel." + std::to_string(i)), ' ');
      Channel c = Channel::parse(parts.at(0));
      for (std::size_t k = 1; k < parts.size(); ++k) {
        if (parts[k] == "sign=1") c.sign_meaningful = true;
        else if (parts[k] == "sign=0") c.sign_meaningful = false;
        else if (parts[k] == "trop=1") c.troposphere_replaceable = true;
        else if (parts[k] == "trop=0") c.troposphere_replaceable = false;
        else fail(ErrorKind::Format, "bad channel flag '", parts[k], "'");
      }
      ch.push_back(c);
    }
    return ChannelLayout(std::move(ch));
  }

  friend bool operator==(const ChannelLayout&, const ChannelLayout&) = default;

 private:
  void validate() const {
    if (channels_.empty()) fail(ErrorKind::Layout, "layout is empty");
    std::set<std::string> seen;
    for (const auto& c : channels_)
      if (!seen.insert(c.name()).second) fail(ErrorKind::Layout, "duplicate channel ", c.name());
  }

  std::vector<Channel> channels_;
};

// ---------------------------------------------------------------------------
// Calendar

struct CivilDate {
  int year = 2000;
  int month = 1;
  int day = 1;

  friend auto operator<=>(const CivilDate&, const CivilDate&) = default;

  std::string to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month, day);
    return buf;
  }
};

inline std::ostream& operator<<(std::ostream& os, const CivilDate& d) { return os << d.to_string(); }

constexpr bool is_leap_year(int y) noexcept { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

constexpr int days_in_month(int y, int m) noexcept {
  constexpr int days[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  return m == 2 && is_leap_year(y) ? 29 : days[m - 1];
}

constexpr CivilDate next_day(CivilDate d) noexcept {
  if (d.day < days_in_month(d.year, d.month)) return {d.year, d.month, d.day + 1};
  if (d.month < 12) return {d.year, d.month + 1, 1};
  return {d.year + 1, 1, 1};
}

struct MonthDay {
  int month = 1;
  int day = 1;
  friend bool operator==(const MonthDay&, const MonthDay&) = default;
};

/// Dates of a winter season labelled `year`: Oct 1 of year-1 onward, with
/// Apr 30 dropped in leap years so every season has the same length.
inline std::vector<CivilDate> season_dates(int year, std::size_t length) {
  std::vector<CivilDate> out;
  out.reserve(length);
  CivilDate d{year - 1, 10, 1};
  while (out.size() < length) {
    if (!(is_leap_year(year) && d.year == year && d.month == 4 && d.day == 30)) out.push_back(d);
    d = next_day(d);
  }
  return out;
}

inline std::vector<MonthDay> season_calendar(int year, std::size_t length) {
  std::vector<MonthDay> out;
  for (const auto& d : season_dates(year, length)) out.push_back({d.month, d.day});
  return out;
}

/// Extended winter (Nov 1 - Mar 31) used for climatology.
constexpr bool in_climatology_window(MonthDay md) noexcept {
  return md.month == 11 || md.month == 12 || md.month <= 3;
}

}  // namespace fmcast

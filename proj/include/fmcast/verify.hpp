// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmcast/season.hpp"

namespace fmcast {

// ---------------------------------------------------------------------------
// Polar vortex index

/// Zonal mean of one u field (lat x lon, row-major) at `row`.
template <class T>
double vortex_index(std::span<const T> u_field, const GridSpec& grid, std::size_t row) {
  if (u_field.size() != grid.plane())
    fail(ErrorKind::Shape, "u field has ", u_field.size(), " values, grid plane is ", grid.plane());
  if (row >= grid.n_lat) fail(ErrorKind::Range, "row ", row, " outside grid of ", grid.n_lat, " rows");
  double sum = 0.0;
  for (std::size_t j = 0; j < grid.n_lon; ++j) sum += static_cast<double>(u_field[row * grid.n_lon + j]);
  return sum / static_cast<double>(grid.n_lon);
}

/// Index at the diagnostic row from the 10 hPa u channel of day `d`.
template <class T>
double vortex_index(const Season<T>& s, std::size_t d) {
  return vortex_index(s.field(d, s.layout.diagnostic_u()), s.grid, s.grid.diagnostic_row());
}

template <class T>
std::vector<double> vortex_index_series(const Season<T>& s) {
  std::vector<double> out(s.days());
  for (std::size_t d = 0; d < s.days(); ++d) out[d] = vortex_index(s, d);
  return out;
}

// ---------------------------------------------------------------------------
// Climatology

/// Per-gridpoint mean over every November-March day, channel x lat x lon.
struct Climatology {
  GridSpec grid;
  ChannelLayout layout;
  std::vector<double> mean;
  std::size_t days = 0;  // contributing days

  std::span<const double> field(std::size_t c) const {
    return std::span<const double>(mean).subspan(c * grid.plane(), grid.plane());
  }
};

template <class T>
Climatology climatology(const std::vector<Season<T>>& archive) {
  if (archive.empty()) fail(ErrorKind::Domain, "climatology needs at least one season");
  Climatology cl;
  cl.grid = archive.front().grid;
  cl.layout = archive.front().layout;
  const std::size_t per_day = cl.layout.size() * cl.grid.plane();
  cl.mean.assign(per_day, 0.0);
  for (const auto& s : archive) {
    if (!(s.grid == cl.grid) || !(s.layout == cl.layout))
      fail(ErrorKind::Layout, "season ", s.year, " does not share the archive grid and layout");
    if (s.normalized) fail(ErrorKind::Domain, "climatology expects physical units, season ", s.year, " is normalized");
    for (std::size_t d = 0; d < s.days(); ++d) {
      if (!in_climatology_window(s.calendar[d])) continue;
      const auto day = s.day(d);
      for (std::size_t i = 0; i < per_day; ++i) cl.mean[i] += static_cast<double>(day[i]);
      ++cl.days;
    }
  }
  if (cl.days == 0) fail(ErrorKind::Domain, "archive has no November-March days");
  for (auto& v : cl.mean) v /= static_cast<double>(cl.days);
  return cl;
}

/// One channel of the climatology.
template <class T>
std::vector<double> climatology(const std::vector<Season<T>>& archive, std::size_t channel) {
  const auto cl = climatology(archive);
  if (channel >= cl.layout.size()) fail(ErrorKind::Range, "channel ", channel, " outside layout");
  const auto f = cl.field(channel);
  return {f.begin(), f.end()};
}

// ---------------------------------------------------------------------------
// Field scores

template <class A, class B>
double rmse(std::span<const A> pred, std::span<const B> truth) {
  if (pred.size() != truth.size() || pred.empty())
    fail(ErrorKind::Shape, "rmse fields have ", pred.size(), " and ", truth.size(), " values");
  double sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(pred.size()));
}

/// Anomalies below this fraction of the field magnitude count as identically
/// zero: a float copy of the double climatology differs from it by rounding.
inline constexpr double kZeroAnomalyRelative = 1e-6;

/// Centered pattern correlation of (pred - clim) with (truth - clim).
template <class A, class B>
double acc(std::span<const A> pred, std::span<const B> truth, std::span<const double> clim) {
  if (pred.size() != truth.size() || pred.size() != clim.size() || pred.empty())
    fail(ErrorKind::Shape, "acc fields have ", pred.size(), ", ", truth.size(), " and ", clim.size(), " values");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0, cl2 = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += static_cast<double>(pred[i]) - clim[i];
    mt += static_cast<double>(truth[i]) - clim[i];
    cl2 += clim[i] * clim[i];
  }
  mp /= n;
  mt /= n;
  double spp = 0.0, stt = 0.0, spt = 0.0, ap2 = 0.0, at2 = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double ap = static_cast<double>(pred[i]) - clim[i];
    const double at = static_cast<double>(truth[i]) - clim[i];
    ap2 += ap * ap;
    at2 += at * at;
    spp += (ap - mp) * (ap - mp);
    stt += (at - mt) * (at - mt);
    spt += (ap - mp) * (at - mt);
  }
  const double floor = kZeroAnomalyRelative * kZeroAnomalyRelative * cl2;
  if (ap2 <= floor) fail(ErrorKind::UndefinedAcc, "forecast anomaly is identically zero");
  if (at2 <= floor) fail(ErrorKind::UndefinedAcc, "observed anomaly is identically zero");
  if (spp == 0.0 || stt == 0.0) fail(ErrorKind::UndefinedAcc, "anomaly field has no spatial variance");
  return std::clamp(spt / std::sqrt(spp * stt), -1.0, 1.0);
}

inline constexpr double kAccSkillThreshold = 0.5;

/// Longest prefix of forecast days whose ACC stays above 0.5.
inline std::size_t acc_lead_time(std::span<const double> acc_by_day) {
  if (acc_by_day.empty()) fail(ErrorKind::Domain, "acc lead time needs a nonempty series");
  std::size_t n = 0;
  while (n < acc_by_day.size() && acc_by_day[n] > kAccSkillThreshold) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Event verdicts

enum class Criterion { Strict, Relaxed };

inline constexpr double kStrictThreshold = 0.0;   // m/s
inline constexpr double kRelaxedThreshold = 5.0;  // m/s

inline double threshold(Criterion c) noexcept { return c == Criterion::Strict ? kStrictThreshold : kRelaxedThreshold; }
inline const char* criterion_name(Criterion c) noexcept { return c == Criterion::Strict ? "strict" : "relaxed"; }

inline Criterion parse_criterion(std::string_view s) {
  if (s == "strict") return Criterion::Strict;
  if (s == "relaxed") return Criterion::Relaxed;
  fail(ErrorKind::Format, "unknown criterion '", s, "'");
}

enum class Timing { Timely, Early, Late, Missed, BeyondHorizon };

inline const char* timing_name(Timing t) noexcept {
  switch (t) {
    case Timing::Timely: return "timely";
    case Timing::Early: return "early";
    case Timing::Late: return "late";
    case Timing::Missed: return "missed";
    case Timing::BeyondHorizon: return "beyond-horizon";
  }
  return "unknown";
}

struct SSWVerdict {
  bool detected = false;
  std::optional<std::size_t> onset;  // series index of the first qualifying day
  Criterion criterion = Criterion::Strict;
  Timing timing = Timing::Missed;
  bool success = false;
};

/// Occurrence only: first day whose index falls below the criterion threshold.
inline SSWVerdict detect_ssw(std::span<const double> index, Criterion c) {
  if (index.empty()) fail(ErrorKind::Domain, "cannot detect an event in an empty index series");
  SSWVerdict v;
  v.criterion = c;
  const double th = threshold(c);
  for (std::size_t d = 0; d < index.size(); ++d)
    if (index[d] < th) {
      v.detected = true;
      v.onset = d;
      break;
    }
  return v;
}

/// Allowed onset error in days for a forecast issued `lead` days ahead.
inline int timing_window(int lead) {
  if (lead < 1) fail(ErrorKind::Domain, "lead must be at least one day, got ", lead);
  if (lead >= 10) return 5;
  if (lead >= 6) return 3;
  return 2;
}

/// Occurrence plus timing. `actual_onset` uses the series' own day indexing;
/// an onset past the end of the series is a failure flagged BeyondHorizon.
inline SSWVerdict member_verdict(std::span<const double> index, std::size_t actual_onset, int lead, Criterion c,
                                 std::optional<int> window = std::nullopt) {
  auto v = detect_ssw(index, c);
  const int w = window ? *window : timing_window(lead);
  if (w < 0) fail(ErrorKind::Domain, "timing window must be non-negative, got ", w);
  if (actual_onset >= index.size()) {
    v.timing = Timing::BeyondHorizon;
    return v;
  }
  if (!v.detected) return v;
  const long err = static_cast<long>(*v.onset) - static_cast<long>(actual_onset);
  v.timing = std::labs(err) <= w ? Timing::Timely : (err < 0 ? Timing::Early : Timing::Late);
  v.success = v.timing == Timing::Timely;
  return v;
}

/// Percentage of successful members.
inline double ensemble_accuracy(std::span<const SSWVerdict> verdicts) {
  if (verdicts.empty()) fail(ErrorKind::Domain, "ensemble accuracy needs at least one verdict");
  std::size_t ok = 0;
  for (const auto& v : verdicts) ok += v.success ? 1 : 0;
  return 100.0 * static_cast<double>(ok) / static_cast<double>(verdicts.size());
}

}  // namespace fmcast

// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fmcast/grid.hpp"
#include "fmcast/tensor.hpp"
#include "fmcast/text_header.hpp"

namespace fmcast {

/// One winter of daily fields, values shaped (day, channel, lat, lon).
template <class T = float>
struct Season {
  int year = 0;
  GridSpec grid;
  ChannelLayout layout;
  std::vector<MonthDay> calendar;
  Tensor<T> values;
  bool normalized = false;
  std::string stats_fingerprint;  // provenance of the normalization, empty when physical
  std::vector<int> stats_years;

  std::size_t days() const noexcept { return values.shape().n; }
  std::size_t channels() const noexcept { return values.shape().c; }

  std::span<const T> day(std::size_t d) const { return values.sample(d); }
  std::span<T> day(std::size_t d) { return values.sample(d); }
  std::span<const T> field(std::size_t d, std::size_t c) const { return values.plane(d, c); }
  std::span<T> field(std::size_t d, std::size_t c) { return values.plane(d, c); }

  /// Empty season with calendar from the standard winter dates.
  static Season zeros(int year, const GridSpec& grid, const ChannelLayout& layout, std::size_t length) {
    Season s;
    s.year = year;
    s.grid = grid;
    s.layout = layout;
    s.calendar = season_calendar(year, length);
    s.values = Tensor<T>(Shape4{length, layout.size(), grid.n_lat, grid.n_lon});
    return s;
  }

  void validate() const {
    grid.validate();
    const Shape4 want{calendar.size(), layout.size(), grid.n_lat, grid.n_lon};
    if (values.shape() != want)
      fail(ErrorKind::Shape, "season ", year, " values ", values.shape(), " do not match ", want);
    if (!values.all_finite()) fail(ErrorKind::NonFinite, "season ", year, " holds non-finite values");
  }

  template <class U>
  Season<U> cast() const {
    Season<U> out;
    out.year = year;
    out.grid = grid;
    out.layout = layout;
    out.calendar = calendar;
    out.values = values.template cast<U>();
    out.normalized = normalized;
    out.stats_fingerprint = stats_fingerprint;
    out.stats_years = stats_years;
    return out;
  }
};

using SeasonTensor = Season<float>;

// ---------------------------------------------------------------------------
// Season assembly from dated daily fields

template <class T = float>
struct DatedField {
  CivilDate date;
  std::vector<T> values;  // channel x lat x lon
};

struct SeasonSpec {
  int year = 2001;
  GridSpec grid;
  ChannelLayout layout;
  std::size_t season_length = 212;
};

/// Assembles Oct 1 (year-1) onward into one season; Apr 30 of a leap year is
/// accepted on input and dropped.
template <class T>
Season<T> build_season_tensor(const std::vector<DatedField<T>>& daily, const SeasonSpec& spec) {
  spec.grid.validate();
  const auto kept = season_dates(spec.year, spec.season_length);
  std::vector<CivilDate> expected;
  for (CivilDate d{spec.year - 1, 10, 1}; d <= kept.back(); d = next_day(d)) expected.push_back(d);
  // The dropped leap-year Apr 30 may be present but is not required.
  CivilDate last_allowed = kept.back();
  if (is_leap_year(spec.year) && next_day(last_allowed) == CivilDate{spec.year, 4, 30}) last_allowed = next_day(last_allowed);

  std::map<CivilDate, const DatedField<T>*> by_date;
  const std::size_t per_day = spec.layout.size() * spec.grid.plane();
  for (const auto& f : daily) {
    if (f.values.size() != per_day)
      fail(ErrorKind::Shape, "field for ", f.date, " has ", f.values.size(), " values, expected ", per_day);
    if (!by_date.emplace(f.date, &f).second) fail(ErrorKind::Duplicate, "date ", f.date, " appears more than once");
    if (f.date < expected.front() || f.date > last_allowed)
      fail(ErrorKind::Range, "date ", f.date, " lies outside season ", spec.year);
  }
  for (const auto& d : expected)
    if (!by_date.count(d)) fail(ErrorKind::Gap, "season ", spec.year, " is missing ", d);

  Season<T> s = Season<T>::zeros(spec.year, spec.grid, spec.layout, spec.season_length);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& src = by_date.at(kept[i])->values;
    std::copy(src.begin(), src.end(), s.day(i).begin());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Normalization statistics

/// Per-channel spatiotemporal mean and standard deviation over training years.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  ChannelLayout layout;
  std::vector<int> years;

  std::string fingerprint() const {
    TextHeader h;
    write(h);
    Fnv1a f;
    f.update(h.serialize());
    return hex64(f.digest());
  }

  void write(TextHeader& h) const {
    std::ostringstream m, s, y;
    m.precision(17);
    s.precision(17);
    for (std::size_t c = 0; c < mean.size(); ++c) {
      m << (c ? "," : "") << mean[c];
      s << (c ? "," : "") << stddev[c];
    }
    for (std::size_t i = 0; i < years.size(); ++i) y << (i ? "," : "") << years[i];
    h.set("stats_mean", m.str());
    h.set("stats_std", s.str());
    h.set("stats_years", y.str());
  }

  /// Reads stats written by `write`; the layout comes from the same header.
  static NormStats read(const TextHeader& h, const ChannelLayout& layout) {
    NormStats st;
    st.layout = layout;
    for (const auto& v : split(h.get("stats_mean"), ',')) st.mean.push_back(TextHeader::parse_double(v, "stats_mean"));
    for (const auto& v : split(h.get("stats_std"), ',')) st.stddev.push_back(TextHeader::parse_double(v, "stats_std"));
    const auto ys = h.get("stats_years");
    if (!ys.empty())
      for (const auto& v : split(ys, ',')) st.years.push_back(static_cast<int>(TextHeader::parse_int(v, "stats_years")));
    if (st.mean.size() != layout.size() || st.stddev.size() != layout.size())
      fail(ErrorKind::Format, "stats arity does not match the channel layout");
    return st;
  }
};

/// Two-pass double-precision statistics. Seasons are visited in year order so
/// the result does not depend on the order they are passed in.
template <class T>
NormStats compute_norm_stats(const std::vector<Season<T>>& train, double sigma_floor = 1e-12) {
  if (train.empty()) fail(ErrorKind::Domain, "normalization statistics need at least one season");
  const auto& ref = train.front();
  for (const auto& s : train) {
    if (!(s.grid == ref.grid)) fail(ErrorKind::Layout, "season ", s.year, " grid differs from season ", ref.year);
    if (!(s.layout == ref.layout)) fail(ErrorKind::Layout, "season ", s.year, " layout differs from season ", ref.year);
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return train[a].year < train[b].year; });

  const std::size_t nc = ref.layout.size();
  NormStats st;
  st.layout = ref.layout;
  st.mean.assign(nc, 0.0);
  st.stddev.assign(nc, 0.0);
  for (auto i : order) st.years.push_back(train[i].year);

  for (std::size_t c = 0; c < nc; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (auto i : order) {
      const auto& s = train[i];
      for (std::size_t d = 0; d < s.days(); ++d)
        for (T v : s.field(d, c)) sum += static_cast<double>(v);
      count += s.days() * s.grid.plane();
    }
    const double m = sum / static_cast<double>(count);
    double sq = 0.0;
    for (auto i : order) {
      const auto& s = train[i];
      for (std::size_t d = 0; d < s.days(); ++d)
        for (T v : s.field(d, c)) {
          const double dv = static_cast<double>(v) - m;
          sq += dv * dv;
        }
    }
    const double sd = std::sqrt(sq / static_cast<double>(count));
    if (!(sd >= sigma_floor))
      fail(ErrorKind::Degenerate, "channel ", ref.layout[c].name(), " has standard deviation ", sd, " below ",
           sigma_floor);
    st.mean[c] = m;
    st.stddev[c] = sd;
  }
  return st;
}

namespace detail {

inline void check_layout(const ChannelLayout& a, const NormStats& st) {
  if (!(a == st.layout)) fail(ErrorKind::Layout, "season layout does not match the normalization statistics");
}

}  // namespace detail

/// Field-level normalization for one channel. Sign-meaningful channels are
/// only scaled.
template <class T>
void normalize_field(std::span<T> field, const Channel& ch, double mean, double sd) {
  const double shift = ch.sign_meaningful ? 0.0 : mean;
  for (auto& v : field) v = static_cast<T>((static_cast<double>(v) - shift) / sd);
}

template <class T>
void denormalize_field(std::span<T> field, const Channel& ch, double mean, double sd) {
  const double shift = ch.sign_meaningful ? 0.0 : mean;
  for (auto& v : field) v = static_cast<T>(static_cast<double>(v) * sd + shift);
}

template <class T>
Season<T> normalize(const Season<T>& season, const NormStats& st) {
  detail::check_layout(season.layout, st);
  if (season.normalized) fail(ErrorKind::Domain, "season ", season.year, " is already normalized");
  Season<T> out = season;
  for (std::size_t d = 0; d < out.days(); ++d)
    for (std::size_t c = 0; c < out.channels(); ++c)
      normalize_field(out.field(d, c), st.layout[c], st.mean[c], st.stddev[c]);
  out.normalized = true;
  out.stats_fingerprint = st.fingerprint();
  out.stats_years = st.years;
  return out;
}

template <class T>
Season<T> denormalize(const Season<T>& season, const NormStats& st) {
  detail::check_layout(season.layout, st);
  Season<T> out = season;
  for (std::size_t d = 0; d < out.days(); ++d)
    for (std::size_t c = 0; c < out.channels(); ++c)
      denormalize_field(out.field(d, c), st.layout[c], st.mean[c], st.stddev[c]);
  out.normalized = false;
  out.stats_fingerprint.clear();
  out.stats_years.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Train/test period splits

struct YearBlock {
  int first = 0;
  int last = 0;
};

struct PeriodSplit {
  std::string name;
  std::vector<int> train_years;
  std::vector<int> test_years;
};

/// Held-out blocks used for the 1980-2024 archive.
inline std::vector<YearBlock> paper_test_blocks() { return {{2018, 2024}, {2006, 2013}, {1998, 2004}}; }

/// Leave-a-block-out splits. Without explicit blocks the 1980-2024 archive gets
/// its three standard periods; any other archive holds out its last quarter.
inline std::vector<PeriodSplit> make_period_splits(std::vector<int> archive_years, std::vector<YearBlock> blocks = {}) {
  if (archive_years.empty()) fail(ErrorKind::Range, "archive has no years");
  std::sort(archive_years.begin(), archive_years.end());
  for (std::size_t i = 1; i < archive_years.size(); ++i)
    if (archive_years[i] != archive_years[i - 1] + 1)
      fail(ErrorKind::Range, "archive years are not contiguous at ", archive_years[i - 1], "..", archive_years[i]);
  const int lo = archive_years.front();
  const int hi = archive_years.back();
  if (blocks.empty()) {
    if (lo == 1980 && hi == 2024) {
      blocks = paper_test_blocks();
    } else {
      const int n = hi - lo + 1;
      const int held = std::max(1, (n + 3) / 4);
      blocks.push_back({hi - held + 1, hi});
    }
  }
  std::vector<PeriodSplit> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    if (blk.first > blk.last) fail(ErrorKind::Range, "test block ", blk.first, "-", blk.last, " is reversed");
    if (blk.first < lo || blk.last > hi)
      fail(ErrorKind::Range, "test block ", blk.first, "-", blk.last, " lies outside archive ", lo, "-", hi);
    PeriodSplit s;
    s.name = "period-" + std::to_string(b + 1);
    for (int y : archive_years) (y >= blk.first && y <= blk.last ? s.test_years : s.train_years).push_back(y);
    if (s.train_years.empty()) fail(ErrorKind::Range, "test block ", blk.first, "-", blk.last, " leaves no training years");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fmcast

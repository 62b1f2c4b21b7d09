// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fmcast/forecast.hpp"
#include "fmcast/synth.hpp"
#include "fmcast/verify.hpp"

namespace fmcast {

inline constexpr std::array<int, 6> kDefaultLeads{20, 15, 12, 10, 7, 5};

/// Scores of one ensemble against truth. Member index `members()` in the
/// per-member tables is the ensemble mean.
struct VerificationReport {
  int year = 0;
  std::size_t init_day = 0;
  std::optional<EventLabel> event;
  std::optional<int> lead;  // days from initialization to the labelled onset
  ChannelLayout layout;
  std::size_t n_members = 0;
  std::size_t horizon = 0;

  std::vector<std::vector<std::vector<double>>> rmse;                // [channel][day][member]
  std::vector<std::vector<std::vector<std::optional<double>>>> acc;  // nullopt: undefined
  std::vector<std::vector<double>> member_index;                     // [member][day]
  std::vector<double> mean_index, std_index, truth_index;
  std::vector<std::size_t> acc_lead_time;  // per channel, from the ensemble-mean ACC

  std::vector<SSWVerdict> strict, relaxed;  // per member, empty without an event
  std::optional<double> strict_accuracy, relaxed_accuracy;
  bool beyond_horizon = false;

  std::size_t members() const noexcept { return n_members; }
  std::optional<double> accuracy(Criterion c) const { return c == Criterion::Strict ? strict_accuracy : relaxed_accuracy; }
};

namespace detail {

inline std::optional<double> acc_or_undefined(std::span<const double> pred, std::span<const float> truth,
                                              std::span<const double> clim) {
  try {
    return acc(pred, truth, clim);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::UndefinedAcc) throw;
    return std::nullopt;
  }
}

}  // namespace detail

/// truth: physical season covering the forecast days; clim from the training years.
inline VerificationReport build_report(const ForecastEnsemble& ens, const SeasonTensor& truth, const Climatology& clim,
                                       std::optional<EventLabel> event = std::nullopt) {
  if (truth.normalized) fail(ErrorKind::Domain, "truth season ", truth.year, " must be in physical units");
  if (truth.year != ens.year) fail(ErrorKind::Domain, "truth season ", truth.year, " does not match forecast year ", ens.year);
  if (!(truth.grid == ens.grid) || !(truth.layout == ens.layout) || !(clim.grid == ens.grid) || !(clim.layout == ens.layout))
    fail(ErrorKind::Layout, "ensemble, truth and climatology must share grid and layout");
  const std::size_t H = ens.horizon(), M = ens.members(), C = ens.layout.size();
  if (truth.days() < ens.config.init_day + H)
    fail(ErrorKind::Range, "truth season ", truth.year, " ends before forecast day ", ens.config.init_day + H - 1);
  for (std::size_t k = 0; k < H; ++k)
    if (!(truth.calendar[ens.config.init_day + k] == ens.calendar[k]))
      fail(ErrorKind::Domain, "forecast calendar disagrees with truth at forecast day ", k);

  VerificationReport r;
  r.year = ens.year;
  r.init_day = ens.config.init_day;
  r.layout = ens.layout;
  r.n_members = M;
  r.horizon = H;
  const auto members = ens.physical();
  const std::size_t plane = ens.grid.plane();
  const std::size_t u = ens.layout.diagnostic_u();
  const std::size_t row = ens.grid.diagnostic_row();

  r.rmse.assign(C, std::vector<std::vector<double>>(H, std::vector<double>(M + 1)));
  r.acc.assign(C, std::vector<std::vector<std::optional<double>>>(H, std::vector<std::optional<double>>(M + 1)));
  std::vector<double> pred(plane), mean(plane);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < H; ++k) {
      const auto tf = truth.field(ens.config.init_day + k, c);
      std::fill(mean.begin(), mean.end(), 0.0);
      for (std::size_t m = 0; m < M; ++m) {
        const auto f = members[m].field(k, c);
        for (std::size_t i = 0; i < plane; ++i) {
          pred[i] = f[i];
          mean[i] += f[i];
        }
        r.rmse[c][k][m] = rmse(std::span<const double>(pred), tf);
        r.acc[c][k][m] = detail::acc_or_undefined(pred, tf, clim.field(c));
      }
      for (auto& v : mean) v /= static_cast<double>(M);
      r.rmse[c][k][M] = rmse(std::span<const double>(mean), tf);
      r.acc[c][k][M] = detail::acc_or_undefined(mean, tf, clim.field(c));
    }

  r.member_index.assign(M, std::vector<double>(H));
  r.mean_index.assign(H, 0.0);
  r.std_index.assign(H, 0.0);
  r.truth_index.resize(H);
  for (std::size_t k = 0; k < H; ++k) {
    for (std::size_t m = 0; m < M; ++m) {
      r.member_index[m][k] = vortex_index(members[m].field(k, u), ens.grid, row);
      r.mean_index[k] += r.member_index[m][k];
    }
    r.mean_index[k] /= static_cast<double>(M);
    for (std::size_t m = 0; m < M; ++m) r.std_index[k] += std::pow(r.member_index[m][k] - r.mean_index[k], 2);
    r.std_index[k] = std::sqrt(r.std_index[k] / static_cast<double>(M));
    r.truth_index[k] = vortex_index(truth, ens.config.init_day + k);
  }

  r.acc_lead_time.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> series(H);
    for (std::size_t k = 0; k < H; ++k) series[k] = r.acc[c][k][M].value_or(-1.0);
    r.acc_lead_time[c] = acc_lead_time(series);
  }

  if (event) {
    if (event->year != ens.year) fail(ErrorKind::Domain, "event year ", event->year, " differs from forecast year ", ens.year);
    if (event->onset_day < ens.config.init_day)
      fail(ErrorKind::Domain, "event onset ", event->onset_day, " precedes initialization day ", ens.config.init_day);
    r.event = event;
    const std::size_t onset = event->onset_day - ens.config.init_day;
    r.lead = static_cast<int>(onset);
    const int lead_for_window = std::max(1, *r.lead);
    r.beyond_horizon = onset >= H;
    for (std::size_t m = 0; m < M; ++m) {
      r.strict.push_back(member_verdict(r.member_index[m], onset, lead_for_window, Criterion::Strict));
      r.relaxed.push_back(member_verdict(r.member_index[m], onset, lead_for_window, Criterion::Relaxed));
    }
    r.strict_accuracy = ensemble_accuracy(r.strict);
    r.relaxed_accuracy = ensemble_accuracy(r.relaxed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "undefined"; }

/// `provenance` lines become leading `# key: value` comments.
inline std::ofstream open_csv(const std::filesystem::path& path, std::string_view header,
                              const TextHeader* provenance = nullptr) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  if (provenance)
    for (const auto& [k, v] : provenance->entries()) os << "# " << k << ": " << v << "\n";
  os << header << "\n";
  return os;
}

inline std::string member_name(std::size_t m, std::size_t members) { return m == members ? "mean" : std::to_string(m); }

}  // namespace detail

inline std::string event_key(const EventLabel& e) { return std::to_string(e.year) + ":" + std::to_string(e.onset_day); }

/// One directory per ensemble: rmse.csv, acc.csv, index.csv, verdicts.csv,
/// accuracy.csv, acc_lead_time.csv.
inline void write_report(const std::filesystem::path& dir, const VerificationReport& r,
                         const TextHeader* provenance = nullptr) {
  std::filesystem::create_directories(dir);
  const std::string lead = r.lead ? std::to_string(*r.lead) : "none";
  {
    auto rm = detail::open_csv(dir / "rmse.csv", "lead,day,member,channel,value", provenance);
    auto ac = detail::open_csv(dir / "acc.csv", "lead,day,member,channel,value", provenance);
    for (std::size_t c = 0; c < r.layout.size(); ++c)
      for (std::size_t k = 0; k < r.horizon; ++k)
        for (std::size_t m = 0; m <= r.members(); ++m) {
          const auto prefix = lead + "," + std::to_string(k) + "," + detail::member_name(m, r.members()) + "," +
                              r.layout[c].name() + ",";
          rm << prefix << detail::fmt(r.rmse[c][k][m]) << "\n";
          ac << prefix << detail::fmt(r.acc[c][k][m]) << "\n";
        }
  }
  {
    auto os = detail::open_csv(dir / "index.csv", "lead,day,member,value", provenance);
    for (std::size_t k = 0; k < r.horizon; ++k) {
      for (std::size_t m = 0; m < r.members(); ++m)
        os << lead << "," << k << "," << m << "," << detail::fmt(r.member_index[m][k]) << "\n";
      os << lead << "," << k << ",mean," << detail::fmt(r.mean_index[k]) << "\n";
      os << lead << "," << k << ",std," << detail::fmt(r.std_index[k]) << "\n";
      os << lead << "," << k << ",truth," << detail::fmt(r.truth_index[k]) << "\n";
    }
  }
  {
    auto os = detail::open_csv(dir / "acc_lead_time.csv", "lead,channel,value", provenance);
    for (std::size_t c = 0; c < r.layout.size(); ++c) os << lead << "," << r.layout[c].name() << "," << r.acc_lead_time[c] << "\n";
  }
  {
    auto os = detail::open_csv(dir / "verdicts.csv", "lead,member,criterion,detected,onset,timing,success", provenance);
    for (const auto* vs : {&r.strict, &r.relaxed})
      for (std::size_t m = 0; m < vs->size(); ++m) {
        const auto& v = (*vs)[m];
        os << lead << "," << m << "," << criterion_name(v.criterion) << "," << (v.detected ? 1 : 0) << ","
           << (v.onset ? std::to_string(*v.onset) : "none") << "," << timing_name(v.timing) << "," << (v.success ? 1 : 0)
           << "\n";
      }
  }
  {
    auto os = detail::open_csv(dir / "accuracy.csv", "lead,criterion,value,beyond_horizon", provenance);
    for (Criterion c : {Criterion::Strict, Criterion::Relaxed})
      os << lead << "," << criterion_name(c) << "," << (r.accuracy(c) ? detail::fmt(*r.accuracy(c)) : "none") << ","
         << (r.beyond_horizon ? 1 : 0) << "\n";
  }
}

/// Rows are events, columns are (lead, criterion) pairs, cells are ensemble
/// accuracies in percent or "NA" when no ensemble covers the pair.
struct AccuracyMatrix {
  std::vector<int> leads;
  std::vector<EventLabel> events;
  std::map<std::pair<std::string, int>, std::pair<double, double>> cells;  // (event, lead) -> (strict, relaxed)

  void add(const VerificationReport& r) {
    if (!r.event || !r.lead) fail(ErrorKind::Domain, "report without an event cannot enter the accuracy matrix");
    const auto key = std::make_pair(event_key(*r.event), *r.lead);
    if (cells.count(key)) fail(ErrorKind::Duplicate, "two ensembles for event ", key.first, " at lead ", key.second);
    if (std::find(events.begin(), events.end(), *r.event) == events.end()) events.push_back(*r.event);
    cells[key] = {*r.strict_accuracy, *r.relaxed_accuracy};
  }

  void write(const std::filesystem::path& path, const TextHeader* provenance = nullptr) const {
    std::string header = "event";
    for (int l : leads) header += ",lead" + std::to_string(l) + "_strict,lead" + std::to_string(l) + "_relaxed";
    auto os = detail::open_csv(path, header, provenance);
    auto sorted = events;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return std::pair(a.year, a.onset_day) < std::pair(b.year, b.onset_day); });
    for (const auto& e : sorted) {
      os << event_key(e);
      for (int l : leads) {
        const auto it = cells.find({event_key(e), l});
        if (it == cells.end())
          os << ",NA,NA";
        else
          os << "," << detail::fmt(it->second.first) << "," << detail::fmt(it->second.second);
      }
      os << "\n";
    }
  }
};

/// Refuses ensembles normalized with statistics other than `expected`.
inline void check_provenance(const ForecastEnsemble& ens, const std::string& expected, const std::string& what) {
  const auto got = ens.stats.fingerprint();
  if (got != expected)
    fail(ErrorKind::Provenance, what, ": statistics fingerprint ", got, " differs from the archive's ", expected);
}

}  // namespace fmcast

// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fmcast/tensor_io.hpp"
#include "fmcast/verify.hpp"

namespace fmcast {

// Synthetic winters. A latent vortex index U follows a mean-reverting
// recursion driven down by tropospheric wave activity W = A + w:
//   U(d+1) = U(d) + reversion (jet_speed - U(d)) - coupling W(d) + noise e(d)
//   w(d+1) = (1 - activity_reversion) w(d) + activity_noise e'(d)
// A is zero except during one wave-amplification episode per season, started
// with probability trigger_prob on each day of the trigger window. Every
// channel is a smooth function of (U, W) and two drifting wave phases, plus
// small gridpoint noise.

struct SynthParams {
  double jet_speed = 30.0;  // m/s, mean of the index
  double jet_lat = 60.0;    // degrees
  double jet_width = 15.0;  // degrees
  double wave1_amp = 6.0;   // m/s at 10 hPa
  double wave2_amp = 3.0;   // m/s at 10 hPa
  double reversion = 0.1;   // 1/day
  double noise = 1.5;       // m/s per day
  double coupling = 1.0;    // m/s per day per unit wave activity
  double trigger_prob = 0.01;
  std::size_t season_length = 212;
  std::uint64_t seed = 20260101;

  double activity_reversion = 0.3;  // 1/day
  double activity_noise = 0.4;
  double episode_peak = 7.0;            // wave activity at the episode maximum
  std::size_t episode_days = 20;        // collapse-and-recover forcing length
  std::size_t persistent_days = 40;     // collapse-persistent forcing length
  std::size_t trigger_first = 45;       // season day index
  std::size_t trigger_last = 140;
  double phase_drift = 0.15;            // rad/day
  double phase_noise = 0.1;             // rad/day
  double polar_warming = 0.8;           // K per m/s of index deficit
  double field_noise = 0.2;             // gridpoint noise, physical units (x10 for Z)

  GridSpec grid = GridSpec::desk();
  ChannelLayout layout = ChannelLayout::desk();

  void validate() const {
    grid.validate();
    if (!(reversion > 0.0 && reversion < 1.0)) fail(ErrorKind::Config, "reversion rate must lie in (0,1), got ", reversion);
    if (!(activity_reversion > 0.0 && activity_reversion < 1.0))
      fail(ErrorKind::Config, "activity reversion must lie in (0,1), got ", activity_reversion);
    if (!(noise > 0.0)) fail(ErrorKind::Config, "noise scale must be positive, got ", noise);
    if (season_length < 40) fail(ErrorKind::Config, "season length must be at least 40, got ", season_length);
    if (!(trigger_prob >= 0.0 && trigger_prob <= 1.0))
      fail(ErrorKind::Config, "trigger probability must lie in [0,1], got ", trigger_prob);
    if (!(jet_width > 0.0)) fail(ErrorKind::Config, "jet width must be positive");
    if (episode_days < 4 || persistent_days < 4) fail(ErrorKind::Config, "episodes must last at least 4 days");
    if (activity_noise < 0.0 || phase_noise < 0.0 || field_noise < 0.0)
      fail(ErrorKind::Config, "noise scales must be non-negative");
    layout.diagnostic_u();
  }

  void write(TextHeader& h) const {
    h.set_num("synth.jet_speed", jet_speed);
    h.set_num("synth.jet_lat", jet_lat);
    h.set_num("synth.jet_width", jet_width);
    h.set_num("synth.wave1_amp", wave1_amp);
    h.set_num("synth.wave2_amp", wave2_amp);
    h.set_num("synth.reversion", reversion);
    h.set_num("synth.noise", noise);
    h.set_num("synth.coupling", coupling);
    h.set_num("synth.trigger_prob", trigger_prob);
    h.set_num("synth.season_length", season_length);
    h.set_num("synth.seed", seed);
    h.set_num("synth.activity_reversion", activity_reversion);
    h.set_num("synth.activity_noise", activity_noise);
    h.set_num("synth.episode_peak", episode_peak);
    h.set_num("synth.episode_days", episode_days);
    h.set_num("synth.persistent_days", persistent_days);
    h.set_num("synth.trigger_first", trigger_first);
    h.set_num("synth.trigger_last", trigger_last);
    h.set_num("synth.phase_drift", phase_drift);
    h.set_num("synth.phase_noise", phase_noise);
    h.set_num("synth.polar_warming", polar_warming);
    h.set_num("synth.field_noise", field_noise);
  }
};

enum class EventType { CollapseRecover, CollapsePersistent };

inline const char* event_type_name(EventType t) {
  return t == EventType::CollapseRecover ? "collapse-and-recover" : "collapse-persistent";
}

inline EventType parse_event_type(std::string_view s) {
  if (s == "collapse-and-recover") return EventType::CollapseRecover;
  if (s == "collapse-persistent") return EventType::CollapsePersistent;
  fail(ErrorKind::Format, "unknown event type '", s, "'");
}

struct EventLabel {
  int year = 0;
  std::size_t onset_day = 0;
  EventType type = EventType::CollapseRecover;

  friend bool operator==(const EventLabel&, const EventLabel&) = default;
};

/// An event whose index stays easterly this many days from onset is persistent.
inline constexpr std::size_t kPersistentEasterlyDays = 10;

/// Latent daily state of one synthetic season.
struct SynthTrace {
  std::vector<double> index;     // latent U, m/s
  std::vector<double> activity;  // W = A + w
  std::vector<double> phase1;
  std::vector<double> phase2;
};

namespace synth_detail {

inline constexpr std::uint64_t kDynamicsDomain = 0x73796e2d64796eULL;
inline constexpr std::uint64_t kNoiseDomain = 0x73796e2d6e6f69ULL;

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

/// Standard normal from a 64-bit key (Box-Muller on two mixed words).
inline double keyed_normal(std::uint64_t key) {
  const std::uint64_t a = mix64(key);
  const std::uint64_t b = mix64(a ^ 0xd1b54a32d192ed03ULL);
  const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sign and amplitude of each variable's response, scaled by level.
struct LevelShape {
  double strat;  // 1 at 10 hPa, larger aloft, smaller below
  bool troposphere;
};

inline LevelShape level_shape(int hpa) {
  return {std::log(1000.0 / hpa) / std::log(100.0), hpa >= 200};
}

class FieldModel {
 public:
  FieldModel(const SynthParams& p) : p_(p) {
    const auto& g = p.grid;
    jet_.resize(g.n_lat);
    pv_.resize(g.n_lat);
    const auto raw = [&](double lat) { return std::exp(-std::pow((lat - p.jet_lat) / p.jet_width, 2.0)); };
    const auto cap = [&](std::size_t r) { return std::pow(clamp01((g.lat(r) - 30.0) / 60.0), 2.0); };
    double jm = 0.0, pm = 0.0;
    for (std::size_t r = 0; r < g.n_lat; ++r) {
      jm += raw(g.lat(r));
      pm += cap(r);
    }
    jm /= static_cast<double>(g.n_lat);
    pm /= static_cast<double>(g.n_lat);
    const double at_diag = raw(g.lat(g.diagnostic_row())) - jm;
    if (!(std::abs(at_diag) > 1e-6)) fail(ErrorKind::Config, "jet profile vanishes at the diagnostic row");
    for (std::size_t r = 0; r < g.n_lat; ++r) {
      jet_[r] = (raw(g.lat(r)) - jm) / at_diag;
      pv_[r] = cap(r) - pm;
    }
    lon_.resize(g.n_lon);
    for (std::size_t j = 0; j < g.n_lon; ++j) lon_[j] = g.lon(j) * std::numbers::pi / 180.0;
  }

  /// Physical value of channel `c` at (row, col) on a day with state (U, W, phases).
  double value(const Channel& ch, std::size_t row, std::size_t col, double u, double w, double ph1, double ph2) const {
    const auto& g = p_.grid;
    const double q = clamp01((g.lat(row) - 30.0) / 60.0);
    const double cap = q * q;
    const double env = std::sin(std::numbers::pi * q);
    const double lam = lon_[col];
    const auto ls = level_shape(ch.level_hpa);
    const double s = ls.strat;
    const double anomaly = u - p_.jet_speed;
    const double act = std::max(w, -2.0);
    switch (ch.variable) {
      case Variable::U:
        if (ls.troposphere) return (0.3 * u + 2.0 * w) * jet_[row] + 2.0 * env * std::cos(lam - ph1 + 1.0);
        return s * u * jet_[row] +
               s * env * (p_.wave1_amp * (1.0 + 0.1 * act) * std::cos(lam - ph1) + p_.wave2_amp * std::cos(2.0 * lam - ph2));
      case Variable::V:
        return s * env * (p_.wave1_amp * (1.0 + 0.1 * act) * std::sin(lam - ph1) + p_.wave2_amp * std::sin(2.0 * lam - ph2));
      case Variable::PV:
        return s * (0.1 * u * pv_[row] + 0.5 * env * std::cos(lam - ph1 + 0.5));
      case Variable::T:
        if (ls.troposphere) {
          const double base = 288.0 - 6.5 * std::log(1000.0 / ch.level_hpa) * 10.0;
          return base - 30.0 * q + 4.0 * w * cap + 3.0 * (1.0 + 0.3 * act) * env * std::cos(lam - ph1 + tilt(ch.level_hpa));
        }
        return 215.0 + 5.0 * s - 15.0 * cap - p_.polar_warming * anomaly * cap +
               3.0 * s * env * std::cos(lam - ph1 + 0.5 * std::numbers::pi);
      case Variable::Z: {
        const double base = 7000.0 * std::log(1000.0 / ch.level_hpa);
        if (ls.troposphere) {
          const double amp = 40.0 * (1.0 + std::log(850.0 / ch.level_hpa));
          return base - 4.0 * amp * q + 0.5 * amp * w * cap +
                 amp * (1.0 + 0.4 * act) * env * std::cos(lam - ph1 + tilt(ch.level_hpa));
        }
        return base - 600.0 * s * q + 10.0 * s * anomaly * (jet_[row] - cap) + 100.0 * s * env * std::cos(lam - ph1);
      }
    }
    return 0.0;
  }

  /// Gridpoint noise scale per variable.
  double noise_scale(const Channel& ch) const {
    return ch.variable == Variable::Z ? 10.0 * p_.field_noise
           : ch.variable == Variable::PV ? 0.02 * p_.field_noise
                                         : p_.field_noise;
  }

 private:
  static double tilt(int hpa) { return 0.2 + 0.8 * (hpa / 850.0); }

  const SynthParams& p_;
  std::vector<double> jet_;
  std::vector<double> pv_;
  std::vector<double> lon_;
};

/// Activity of an episode `j` days after its trigger.
inline double episode_shape(std::size_t j, std::size_t len, bool persistent) {
  const double pi = std::numbers::pi;
  const double x = static_cast<double>(j);
  const double n = static_cast<double>(len);
  if (j > len) return 0.0;
  if (!persistent) return std::pow(std::sin(pi * x / n), 2.0);
  if (x < n / 4.0) return std::pow(std::sin(pi * x / (n / 2.0)), 2.0);
  if (x <= 3.0 * n / 4.0) return 1.0;
  return std::pow(std::sin(pi * (n - x) / (n / 2.0)), 2.0);
}

inline std::uint64_t season_seed(std::uint64_t master, int year) {
  return derive_seed(master, static_cast<std::uint64_t>(static_cast<std::int64_t>(year)), kDynamicsDomain);
}

inline float noisy(const FieldModel& fm, const Channel& ch, std::size_t c, std::size_t d, std::size_t row,
                   std::size_t col, const SynthTrace& tr, const GridSpec& g, std::uint64_t noise_seed) {
  const double v = fm.value(ch, row, col, tr.index[d], tr.activity[d], tr.phase1[d], tr.phase2[d]);
  const std::uint64_t key = derive_seed(noise_seed, (d * 4096 + c) * g.plane() + row * g.n_lon + col, kNoiseDomain);
  return static_cast<float>(v + fm.noise_scale(ch) * keyed_normal(key));
}

}  // namespace synth_detail

/// Latent dynamics of one season (no fields).
inline SynthTrace simulate_season(const SynthParams& p, int year) {
  p.validate();
  std::mt19937_64 rng(synth_detail::season_seed(p.seed, year));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t n = p.season_length;
  SynthTrace tr;
  tr.index.resize(n);
  tr.activity.resize(n);
  tr.phase1.resize(n);
  tr.phase2.resize(n);
  std::vector<double> episode(n, 0.0);
  bool triggered = false;
  double u = p.jet_speed;
  double w = 0.0;
  double ph1 = 2.0 * std::numbers::pi * unif(rng);
  double ph2 = 2.0 * std::numbers::pi * unif(rng);
  const std::size_t last = std::min(p.trigger_last, n - 1);
  for (std::size_t d = 0; d < n; ++d) {
    if (!triggered && d >= p.trigger_first && d <= last && unif(rng) < p.trigger_prob) {
      triggered = true;
      const bool persistent = unif(rng) < 0.5;
      const std::size_t len = persistent ? p.persistent_days : p.episode_days;
      const double peak = p.episode_peak * (0.85 + 0.3 * unif(rng));
      for (std::size_t j = 0; j <= len && d + j < n; ++j)
        episode[d + j] = peak * synth_detail::episode_shape(j, len, persistent);
    }
    tr.index[d] = u;
    tr.activity[d] = episode[d] + w;
    tr.phase1[d] = ph1;
    tr.phase2[d] = ph2;
    const double e_u = gauss(rng);
    const double e_w = gauss(rng);
    const double e_1 = gauss(rng);
    const double e_2 = gauss(rng);
    u = u + p.reversion * (p.jet_speed - u) - p.coupling * tr.activity[d] + p.noise * e_u;
    w = (1.0 - p.activity_reversion) * w + p.activity_noise * e_w;
    ph1 = std::remainder(ph1 + p.phase_drift + p.phase_noise * e_1, 2.0 * std::numbers::pi);
    ph2 = std::remainder(ph2 + 0.7 * p.phase_drift + p.phase_noise * e_2, 2.0 * std::numbers::pi);
  }
  return tr;
}

/// Stationary standard deviation of the index with no episodes, from the
/// fixed point of the covariance recursion of (U, w).
inline double index_stationary_std(const SynthParams& p) {
  const double a = 1.0 - p.reversion, b = -p.coupling, c = 1.0 - p.activity_reversion;
  double puu = 0.0, puw = 0.0, pww = 0.0;
  for (int it = 0; it < 100000; ++it) {
    const double nuu = a * a * puu + 2.0 * a * b * puw + b * b * pww + p.noise * p.noise;
    const double nuw = a * c * puw + b * c * pww;
    const double nww = c * c * pww + p.activity_noise * p.activity_noise;
    const bool done = std::abs(nuu - puu) < 1e-15 * nuu;
    puu = nuu;
    puw = nuw;
    pww = nww;
    if (done) break;
  }
  return std::sqrt(puu);
}

/// First-crossing labels: day d is an onset iff index(d-1) >= 0 > index(d).
inline std::vector<EventLabel> label_events(std::span<const double> index, int year) {
  std::vector<EventLabel> out;
  for (std::size_t d = 1; d < index.size(); ++d) {
    if (!(index[d - 1] >= 0.0 && index[d] < 0.0)) continue;
    std::size_t run = 0;
    while (d + run < index.size() && index[d + run] < 0.0) ++run;
    out.push_back({year, d, run >= kPersistentEasterlyDays ? EventType::CollapsePersistent : EventType::CollapseRecover});
  }
  return out;
}

/// Vortex index of the generated (float) 10 hPa u field, computed from the
/// diagnostic row alone. Equals vortex_index_series(generate_season(...)).
inline std::vector<double> generated_index(const SynthParams& p, int year, const SynthTrace* trace = nullptr) {
  SynthTrace local;
  if (!trace) {
    local = simulate_season(p, year);
    trace = &local;
  }
  const synth_detail::FieldModel fm(p);
  const auto& g = p.grid;
  const std::size_t c = p.layout.diagnostic_u();
  const std::size_t row = g.diagnostic_row();
  const std::uint64_t ns = synth_detail::season_seed(p.seed, year);
  std::vector<float> buf(g.plane(), 0.0f);
  std::vector<double> out(p.season_length);
  for (std::size_t d = 0; d < p.season_length; ++d) {
    for (std::size_t j = 0; j < g.n_lon; ++j)
      buf[row * g.n_lon + j] = synth_detail::noisy(fm, p.layout[c], c, d, row, j, *trace, g, ns);
    out[d] = vortex_index(std::span<const float>(buf), g, row);
  }
  return out;
}

struct SynthSeason {
  SeasonTensor season;
  std::vector<EventLabel> events;
  SynthTrace trace;
};

inline SynthSeason generate_season(const SynthParams& p, int year) {
  SynthSeason out;
  out.trace = simulate_season(p, year);
  const synth_detail::FieldModel fm(p);
  const auto& g = p.grid;
  const std::uint64_t ns = synth_detail::season_seed(p.seed, year);
  auto s = SeasonTensor::zeros(year, g, p.layout, p.season_length);
  for (std::size_t d = 0; d < p.season_length; ++d)
    for (std::size_t c = 0; c < p.layout.size(); ++c) {
      auto f = s.field(d, c);
      for (std::size_t r = 0; r < g.n_lat; ++r)
        for (std::size_t j = 0; j < g.n_lon; ++j)
          f[r * g.n_lon + j] = synth_detail::noisy(fm, p.layout[c], c, d, r, j, out.trace, g, ns);
    }
  s.validate();
  out.events = label_events(vortex_index_series(s), year);
  out.season = std::move(s);
  return out;
}

struct SynthArchive {
  std::vector<SeasonTensor> seasons;
  std::vector<EventLabel> manifest;
};

inline SynthArchive generate_archive(const SynthParams& p, int first_year, int last_year) {
  if (last_year < first_year) fail(ErrorKind::Range, "empty year range ", first_year, "-", last_year);
  SynthArchive a;
  for (int y = first_year; y <= last_year; ++y) {
    auto s = generate_season(p, y);
    a.seasons.push_back(std::move(s.season));
    a.manifest.insert(a.manifest.end(), s.events.begin(), s.events.end());
  }
  return a;
}

/// Label manifest of an archive, without materializing fields.
inline std::vector<EventLabel> archive_events(const SynthParams& p, int first_year, int last_year) {
  std::vector<EventLabel> out;
  for (int y = first_year; y <= last_year; ++y) {
    const auto e = label_events(generated_index(p, y), y);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest file: "year,onset_day,type" header then one row per event.

inline void write_manifest(const std::filesystem::path& path, const std::vector<EventLabel>& events,
                           const TextHeader* meta = nullptr) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  if (meta)
    for (const auto& [k, v] : meta->entries()) os << "# " << k << ": " << v << "\n";
  os << "year,onset_day,type\n";
  for (const auto& e : events) os << e.year << "," << e.onset_day << "," << event_type_name(e.type) << "\n";
  if (!os) fail(ErrorKind::Io, "write failed for ", path.string());
}

inline std::vector<EventLabel> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open manifest ", path.string());
  std::vector<EventLabel> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (!header) {
      if (t != "year,onset_day,type") fail(ErrorKind::Format, path.string(), ": unexpected manifest header '", t, "'");
      header = true;
      continue;
    }
    const auto f = split(t, ',');
    if (f.size() != 3) fail(ErrorKind::Format, path.string(), ": bad manifest row '", t, "'");
    EventLabel e;
    e.year = static_cast<int>(TextHeader::parse_int(f[0], "year"));
    const auto day = TextHeader::parse_int(f[1], "onset_day");
    if (day < 0) fail(ErrorKind::Format, path.string(), ": negative onset day");
    e.onset_day = static_cast<std::size_t>(day);
    e.type = parse_event_type(trim(f[2]));
    out.push_back(e);
  }
  if (!header) fail(ErrorKind::Format, path.string(), ": manifest has no header");
  return out;
}

}  // namespace fmcast

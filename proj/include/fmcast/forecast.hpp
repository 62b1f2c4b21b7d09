// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "fmcast/net.hpp"
#include "fmcast/tensor_io.hpp"

namespace fmcast {

inline constexpr std::size_t kDefaultSteps = 20;
inline constexpr std::size_t kDefaultHorizon = 30;
inline constexpr std::size_t kDefaultMembers = 50;

enum class Integrator { Euler, Midpoint };

inline const char* integrator_name(Integrator i) noexcept { return i == Integrator::Euler ? "euler" : "midpoint"; }

inline Integrator parse_integrator(std::string_view s) {
  if (s == "euler") return Integrator::Euler;
  if (s == "midpoint") return Integrator::Midpoint;
  fail(ErrorKind::Config, "unknown integrator '", s, "'");
}

struct ForecastConfig {
  std::size_t n_steps = kDefaultSteps;
  std::size_t horizon = kDefaultHorizon;
  std::size_t members = kDefaultMembers;
  std::uint64_t seed = 1;
  bool perfect_troposphere = false;
  std::size_t init_day = 2;  // season index of the first forecast day
  Integrator integrator = Integrator::Euler;

  void validate() const {
    if (n_steps < 1) fail(ErrorKind::Config, "integration steps must be at least 1");
    if (horizon < 1) fail(ErrorKind::Config, "horizon must be at least 1 day");
    if (members < 1) fail(ErrorKind::Config, "ensemble needs at least one member");
    if (init_day < 2) fail(ErrorKind::Config, "initialization day must be at least 2, got ", init_day);
  }

  void write(TextHeader& h) const {
    h.set_num("forecast.n_steps", n_steps);
    h.set_num("forecast.horizon", horizon);
    h.set_num("forecast.members", members);
    h.set_num("forecast.seed", seed);
    h.set("forecast.perfect_troposphere", perfect_troposphere ? "1" : "0");
    h.set_num("forecast.init_day", init_day);
    h.set("forecast.integrator", integrator_name(integrator));
  }

  static ForecastConfig read(const TextHeader& h) {
    ForecastConfig c;
    c.n_steps = static_cast<std::size_t>(h.get_int("forecast.n_steps"));
    c.horizon = static_cast<std::size_t>(h.get_int("forecast.horizon"));
    c.members = static_cast<std::size_t>(h.get_int("forecast.members"));
    c.seed = static_cast<std::uint64_t>(h.get_int("forecast.seed"));
    c.perfect_troposphere = h.get("forecast.perfect_troposphere") == "1";
    c.init_day = static_cast<std::size_t>(h.get_int("forecast.init_day"));
    c.integrator = parse_integrator(h.get("forecast.integrator"));
    c.validate();
    return c;
  }
};

inline constexpr std::uint64_t kMemberDomain = 0x6d656d626572ULL;
inline constexpr std::uint64_t kDayNoiseDomain = 0x646179ULL;

/// Injective in `member` for a fixed master.
constexpr std::uint64_t derive_member_seed(std::uint64_t master, std::uint64_t member) noexcept {
  return derive_seed(master, member, kMemberDomain);
}

// ---------------------------------------------------------------------------
// ODE sampling

/// Integrates dX/dt = v(X, t) from t=0 to t=1 in n equal steps. `v` maps
/// (state, t) to a tensor of the state's shape.
template <class T, class V>
Tensor<T> integrate(V&& v, Tensor<T> x, std::size_t n_steps, Integrator scheme = Integrator::Euler) {
  if (n_steps < 1) fail(ErrorKind::Domain, "integration needs at least one step");
  const double dt = 1.0 / static_cast<double>(n_steps);
  const T h = static_cast<T>(dt);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    Tensor<T> vel = v(static_cast<const Tensor<T>&>(x), t);
    if (scheme == Integrator::Midpoint) {
      Tensor<T> mid = x;
      const T half = static_cast<T>(0.5 * dt);
      for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += half * vel[i];
      vel = v(static_cast<const Tensor<T>&>(mid), t + 0.5 * dt);
    }
    require_same_shape(vel, x, "velocity");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * vel[i];
    if (!x.all_finite()) fail(ErrorKind::Integration, "non-finite state after step ", k + 1, " of ", n_steps);
  }
  return x;
}

/// Seeded standard-normal starting state.
template <class T>
Tensor<T> standard_normal(const Shape4& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto x = Tensor<T>::uninitialized(shape);
  for (auto& v : x.vec()) v = static_cast<T>(g(rng));
  return x;
}

/// Draws x0 from `seed` and integrates the velocity field to t=1.
template <class T, class V>
Tensor<T> sample_next_day(V&& v, const Shape4& shape, std::uint64_t seed, std::size_t n_steps,
                          Integrator scheme = Integrator::Euler) {
  return integrate<T>(std::forward<V>(v), standard_normal<T>(shape, seed), n_steps, scheme);
}

/// The network conditioned on a batch of two-day windows; condition features
/// are computed once and reused by every integration step.
class NetField {
 public:
  NetField(const ModelParameters<float>& params, const PackedParameters<float>& packed, const Tensor<float>& cond)
      : tape_(false), bind_(tape_, params, false, &packed), cond_(cond),
        cf_(encode_condition(bind_, tape_.constant_ref(cond_))) {}

  Tensor<float> operator()(const Tensor<float>& x, double t) {
    return velocity(bind_, tape_.constant_ref(x), std::vector<double>(x.shape().n, t), cf_).value();
  }

 private:
  Tape<float> tape_;
  ParamBinder<float> bind_;
  const Tensor<float>& cond_;
  ConditionFeatures<float> cf_;
};

/// Network sampling of one next-day state. cond: (1, 2C, H, W).
inline Tensor<float> sample_next_day(const ModelParameters<float>& params, const PackedParameters<float>& packed,
                                     const Tensor<float>& cond, std::uint64_t seed, std::size_t n_steps,
                                     Integrator scheme = Integrator::Euler) {
  const auto& cfg = params.config();
  NetField field(params, packed, cond);
  return sample_next_day<float>(field, Shape4{cond.shape().n, cfg.in_channels, cond.shape().h, cond.shape().w}, seed,
                                n_steps, scheme);
}

// ---------------------------------------------------------------------------
// Ensemble forecast

/// T and Z at 850 and 500 hPa, where present in the layout.
inline std::vector<std::size_t> replaceable_channels(const ChannelLayout& layout) {
  std::vector<std::size_t> out;
  for (Variable v : {Variable::T, Variable::Z})
    for (int level : {850, 500})
      if (auto c = layout.find(v, level)) out.push_back(*c);
  std::sort(out.begin(), out.end());
  return out;
}

struct ForecastEnsemble {
  ForecastConfig config;
  std::vector<std::uint64_t> member_seeds;
  int year = 0;
  GridSpec grid;
  ChannelLayout layout;
  NormStats stats;
  std::vector<MonthDay> calendar;  // calendar date of each forecast day
  std::vector<std::size_t> replaced_channels;  // empty unless the intervention ran
  Tensor<float> values;  // normalized, (member * horizon + day, channel, lat, lon)

  std::size_t members() const noexcept { return member_seeds.size(); }
  std::size_t horizon() const noexcept { return config.horizon; }
  /// Days since initialization for forecast index k.
  std::size_t lead_of(std::size_t k) const noexcept { return k; }
  std::size_t season_day(std::size_t k) const noexcept { return config.init_day + k; }

  std::span<const float> state(std::size_t m, std::size_t k) const { return values.sample(m * horizon() + k); }
  std::span<const float> field(std::size_t m, std::size_t k, std::size_t c) const {
    return values.plane(m * horizon() + k, c);
  }

  /// One member's trajectory as a physical-unit season.
  SeasonTensor member_physical(std::size_t m) const {
    SeasonTensor s;
    s.year = year;
    s.grid = grid;
    s.layout = layout;
    s.calendar = calendar;
    s.values = Tensor<float>::uninitialized(Shape4{horizon(), layout.size(), grid.n_lat, grid.n_lon});
    const std::size_t per = layout.size() * grid.plane();
    std::copy_n(values.data() + m * horizon() * per, horizon() * per, s.values.data());
    s.normalized = true;
    s.stats_fingerprint = stats.fingerprint();
    s.stats_years = stats.years;
    return denormalize(s, stats);
  }

  std::vector<SeasonTensor> physical() const {
    std::vector<SeasonTensor> out;
    for (std::size_t m = 0; m < members(); ++m) out.push_back(member_physical(m));
    return out;
  }
};

/// Worker count from FMCAST_THREADS (default 1), capped at `work`.
inline std::size_t worker_threads(std::size_t work) {
  std::size_t n = 1;
  if (const char* env = std::getenv("FMCAST_THREADS")) {
    const long long v = TextHeader::parse_int(env, "FMCAST_THREADS");
    if (v < 1) fail(ErrorKind::Config, "FMCAST_THREADS must be at least 1, got ", v);
    n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, work));
}

struct ForecastInputs {
  /// Two consecutive normalized days (2, C, H, W): init_day - 2, init_day - 1.
  Tensor<float> window;
  /// Normalized truth, required for the intervention; indexed like the season.
  const SeasonTensor* truth = nullptr;
};

namespace detail {

inline void run_members(const ModelParameters<float>& params, const PackedParameters<float>& packed,
                        const ForecastInputs& in, const ForecastConfig& cfg, const std::vector<std::size_t>& replace,
                        std::size_t m0, std::size_t m1, const std::vector<std::uint64_t>& seeds, Tensor<float>& out) {
  const auto& s = in.window.shape();
  const std::size_t per = s.c * s.h * s.w;
  const std::size_t plane = s.h * s.w;
  const std::size_t batch = m1 - m0;
  Tensor<float> cond(Shape4{batch, 2 * s.c, s.h, s.w});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(in.window.data(), 2 * per, cond.data() + b * 2 * per);
  for (std::size_t k = 0; k < cfg.horizon; ++k) {
    auto x0 = Tensor<float>::uninitialized(Shape4{batch, s.c, s.h, s.w});
    for (std::size_t b = 0; b < batch; ++b) {
      const auto z = standard_normal<float>(Shape4{1, s.c, s.h, s.w}, derive_seed(seeds[m0 + b], k, kDayNoiseDomain));
      std::copy_n(z.data(), per, x0.data() + b * per);
    }
    NetField field(params, packed, cond);
    Tensor<float> next;
    try {
      next = integrate<float>(field, std::move(x0), cfg.n_steps, cfg.integrator);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Integration) throw;
      fail(ErrorKind::Integration, "members ", m0, "-", m1 - 1, ", forecast day ", k, ": ", e.what());
    }
    if (!replace.empty()) {
      const auto truth = in.truth->day(cfg.init_day + k);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c : replace) std::copy_n(truth.data() + c * plane, plane, next.data() + b * per + c * plane);
    }
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(next.data() + b * per, per, out.data() + ((m0 + b) * cfg.horizon + k) * per);
      float* cw = cond.data() + b * 2 * per;
      std::copy_n(cw + per, per, cw);
      std::copy_n(next.data() + b * per, per, cw + per);
    }
  }
}

}  // namespace detail

/// Autoregressive ensemble: per member and day, sample, optionally overwrite
/// the replaceable channels with truth, then shift the condition window.
/// Members are batched in chunks; results do not depend on chunking.
inline ForecastEnsemble forecast(const ModelParameters<float>& params, const ForecastInputs& in,
                                 const ForecastConfig& cfg, const NormStats& stats, int year, const GridSpec& grid,
                                 std::size_t chunk = 0) {
  cfg.validate();
  const auto& ncfg = params.config();
  const auto& s = in.window.shape();
  if (s.n != 2 || s.c != ncfg.in_channels || s.h != grid.n_lat || s.w != grid.n_lon)
    fail(ErrorKind::Shape, "initial window ", s, " does not match two days of ", ncfg.in_channels, " channels on the grid");
  if (stats.layout.size() != s.c) fail(ErrorKind::Layout, "stats cover ", stats.layout.size(), " channels, state has ", s.c);
  ForecastEnsemble ens;
  ens.config = cfg;
  ens.year = year;
  ens.grid = grid;
  ens.layout = stats.layout;
  ens.stats = stats;
  const auto full_cal = season_calendar(year, cfg.init_day + cfg.horizon);
  ens.calendar.assign(full_cal.begin() + static_cast<std::ptrdiff_t>(cfg.init_day), full_cal.end());
  for (std::size_t m = 0; m < cfg.members; ++m) ens.member_seeds.push_back(derive_member_seed(cfg.seed, m));
  if (cfg.perfect_troposphere) {
    if (!in.truth) fail(ErrorKind::Intervention, "perfect-troposphere mode needs a truth source");
    const auto& tr = *in.truth;
    if (!tr.normalized) fail(ErrorKind::Intervention, "truth season ", tr.year, " must be normalized");
    if (!(tr.layout == stats.layout) || !(tr.grid == grid))
      fail(ErrorKind::Intervention, "truth season ", tr.year, " does not share the forecast grid and layout");
    if (tr.stats_fingerprint != stats.fingerprint())
      fail(ErrorKind::Intervention, "truth season ", tr.year, " was normalized with different statistics");
    if (tr.days() < cfg.init_day + cfg.horizon)
      fail(ErrorKind::Intervention, "truth season ", tr.year, " has ", tr.days(), " days, intervention needs day ",
           cfg.init_day + cfg.horizon - 1);
    ens.replaced_channels = replaceable_channels(stats.layout);
    if (ens.replaced_channels.empty()) fail(ErrorKind::Intervention, "layout has no replaceable tropospheric channels");
  }
  ens.values = Tensor<float>::uninitialized(Shape4{cfg.members * cfg.horizon, s.c, s.h, s.w});
  const PackedParameters<float> packed(params);

  const std::size_t threads = worker_threads(cfg.members);
  if (chunk == 0) chunk = (cfg.members + threads - 1) / threads;
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t m0 = 0; m0 < cfg.members; m0 += chunk) jobs.emplace_back(m0, std::min(cfg.members, m0 + chunk));
  const auto run = [&](std::size_t j) {
    detail::run_members(params, packed, in, cfg, ens.replaced_channels, jobs[j].first, jobs[j].second,
                        ens.member_seeds, ens.values);
  };
  if (threads == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
  } else {
    std::vector<std::exception_ptr> errors(jobs.size());
    std::vector<std::thread> pool;
    std::mutex mu;
    std::size_t next = 0;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        while (true) {
          std::size_t j;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next == jobs.size()) return;
            j = next++;
          }
          try {
            run(j);
          } catch (...) {
            errors[j] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return ens;
}

/// Initial window from a normalized season at cfg.init_day.
inline ForecastInputs season_inputs(const SeasonTensor& season, const ForecastConfig& cfg, const NormStats& stats,
                                    const SeasonTensor* truth = nullptr) {
  if (!season.normalized) fail(ErrorKind::Domain, "initial season ", season.year, " must be normalized");
  if (season.stats_fingerprint != stats.fingerprint())
    fail(ErrorKind::Provenance, "season ", season.year, " was normalized with different statistics");
  if (cfg.init_day < 2 || cfg.init_day > season.days())
    fail(ErrorKind::Range, "initialization day ", cfg.init_day, " needs two prior days inside season ", season.year);
  ForecastInputs in;
  const std::size_t per = season.channels() * season.grid.plane();
  in.window = Tensor<float>(Shape4{2, season.channels(), season.grid.n_lat, season.grid.n_lon});
  std::copy_n(season.values.data() + (cfg.init_day - 2) * per, 2 * per, in.window.data());
  in.truth = truth;
  return in;
}

inline ForecastEnsemble forecast(const ModelParameters<float>& params, const SeasonTensor& season,
                                 const ForecastConfig& cfg, const NormStats& stats, bool use_season_as_truth = true) {
  const auto in = season_inputs(season, cfg, stats, cfg.perfect_troposphere && use_season_as_truth ? &season : nullptr);
  return forecast(params, in, cfg, stats, season.year, season.grid);
}

// ---------------------------------------------------------------------------
// Ensemble file

inline constexpr std::string_view kEnsembleMagic = "FMCENSB1";

inline void save_ensemble(const std::filesystem::path& path, const ForecastEnsemble& e, const TextHeader* extra = nullptr) {
  TextHeader h;
  e.config.write(h);
  h.set_num("year", e.year);
  write_grid_layout(h, e.grid, e.layout);
  e.stats.write(h);
  h.set("stats_fingerprint", e.stats.fingerprint());
  h.set("calendar", serialize_calendar(e.calendar));
  std::string seeds;
  for (std::size_t m = 0; m < e.member_seeds.size(); ++m) seeds += (m ? "," : "") + std::to_string(e.member_seeds[m]);
  h.set("member_seeds", seeds);
  std::string rep;
  for (std::size_t i = 0; i < e.replaced_channels.size(); ++i)
    rep += (i ? "," : "") + e.layout[e.replaced_channels[i]].name();
  h.set("intervention", e.replaced_channels.empty() ? "none" : "perfect-troposphere");
  h.set("intervention.channels", rep);
  if (extra)
    for (const auto& [k, v] : extra->entries()) h.set(k, v);
  h.set("payload", "f32le normalized member,day,channel,lat,lon");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  write_preamble(os, kEnsembleMagic, h);
  io::put_f32_range(os, e.values.vec().begin(), e.values.vec().end());
  if (!os) fail(ErrorKind::Io, "write failed for ", path.string());
}

inline ForecastEnsemble load_ensemble(const std::filesystem::path& path, TextHeader* header_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open ensemble ", path.string());
  const TextHeader h = read_preamble(is, kEnsembleMagic, path.string());
  ForecastEnsemble e;
  e.config = ForecastConfig::read(h);
  e.year = static_cast<int>(h.get_int("year"));
  e.layout = ChannelLayout::read(h);
  e.grid = GridSpec::parse(h.get("grid"));
  e.stats = NormStats::read(h, e.layout);
  if (e.stats.fingerprint() != h.get("stats_fingerprint"))
    fail(ErrorKind::Provenance, path.string(), ": stored statistics do not match their fingerprint");
  e.calendar = parse_calendar(h.get("calendar"));
  for (const auto& v : split(h.get("member_seeds"), ','))
    e.member_seeds.push_back(std::stoull(trim(v)));
  if (e.member_seeds.size() != e.config.members)
    fail(ErrorKind::Format, path.string(), ": ", e.member_seeds.size(), " seeds for ", e.config.members, " members");
  if (e.calendar.size() != e.config.horizon)
    fail(ErrorKind::Format, path.string(), ": calendar has ", e.calendar.size(), " days, horizon is ", e.config.horizon);
  const auto rep = h.get("intervention.channels");
  if (!trim(rep).empty())
    for (const auto& name : split(rep, ',')) {
      const auto c = e.layout.find(trim(name));
      if (!c) fail(ErrorKind::Format, path.string(), ": unknown replaced channel ", name);
      e.replaced_channels.push_back(*c);
    }
  const Shape4 shape{e.config.members * e.config.horizon, e.layout.size(), e.grid.n_lat, e.grid.n_lon};
  std::vector<float> payload;
  const auto got = io::get_f32(is, payload, shape.numel());
  if (got != shape.numel())
    fail(ErrorKind::Shape, path.string(), ": payload holds ", got, " values, header declares ", shape.numel());
  if (is.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Shape, path.string(), ": trailing bytes after payload");
  e.values = Tensor<float>(shape, std::move(payload));
  if (!e.values.all_finite()) fail(ErrorKind::NonFinite, path.string(), ": payload contains non-finite values");
  if (header_out) *header_out = h;
  return e;
}

}  // namespace fmcast

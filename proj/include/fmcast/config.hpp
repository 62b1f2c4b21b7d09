// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fmcast/forecast.hpp"
#include "fmcast/report.hpp"
#include "fmcast/synth.hpp"
#include "fmcast/train.hpp"

namespace fmcast {

/// Everything one experiment needs. Text form:
///
///   [section]
///   key: value      # comment
///
/// Keys are addressed as `section.key`; unknown keys are errors.
struct ExperimentConfig {
  std::filesystem::path archive_dir = "run/archive";
  std::filesystem::path checkpoint_dir = "run/checkpoints";
  std::filesystem::path ensemble_dir = "run/ensembles";
  std::filesystem::path report_dir = "run/reports";

  SynthParams synth;
  int first_year = 1980;
  int last_year = 1991;
  std::size_t max_reseeds = 64;  // synth retries until the archive holds an event

  NetConfig net;
  TrainConfig train;
  ForecastConfig forecast;

  bool events_from_manifest = true;
  std::vector<EventLabel> events;  // used when not from the manifest
  std::vector<int> leads{kDefaultLeads.begin(), kDefaultLeads.end()};
  int selection_lead = 5;
  std::size_t selection_members = 10;

  void validate() const {
    synth.validate();
    net.validate();
    train.validate();
    forecast.validate();
    if (last_year < first_year) fail(ErrorKind::Config, "archive years ", first_year, "-", last_year, " are empty");
    if (net.in_channels != synth.layout.size())
      fail(ErrorKind::Config, "net.in_channels is ", net.in_channels, " but the layout has ", synth.layout.size(), " channels");
    if (leads.empty()) fail(ErrorKind::Config, "at least one lead is required");
    for (int l : leads)
      if (l < 1) fail(ErrorKind::Config, "leads must be positive, got ", l);
    if (selection_lead < 1) fail(ErrorKind::Config, "selection lead must be positive");
    if (selection_members < 1) fail(ErrorKind::Config, "selection needs at least one member");
    if (!events_from_manifest && events.empty()) fail(ErrorKind::Config, "event list is empty");
  }

  /// Resolved values, one `section.key` per line, in a fixed order.
  TextHeader to_header(bool with_paths = true) const {
    TextHeader h;
    if (with_paths) {
      h.set("paths.archive", archive_dir.string());
      h.set("paths.checkpoints", checkpoint_dir.string());
      h.set("paths.ensembles", ensemble_dir.string());
      h.set("paths.reports", report_dir.string());
    }
    h.set("grid.grid", synth.grid.serialize());
    std::string ch;
    for (std::size_t c = 0; c < synth.layout.size(); ++c) ch += (c ? "," : "") + synth.layout[c].name();
    h.set("grid.channels", ch);
    h.set_num("synth.first_year", first_year);
    h.set_num("synth.last_year", last_year);
    h.set_num("synth.max_reseeds", max_reseeds);
    synth.write(h);
    net.write(h);
    train.write(h);
    h.set_num("train.checkpoint_every", train.checkpoint_every);
    forecast.write(h);
    h.set("evaluate.events", events_string());
    std::string ls;
    for (std::size_t i = 0; i < leads.size(); ++i) ls += (i ? "," : "") + std::to_string(leads[i]);
    h.set("evaluate.leads", ls);
    h.set_num("evaluate.selection_lead", selection_lead);
    h.set_num("evaluate.selection_members", selection_members);
    return h;
  }

  std::string serialize() const { return to_header().serialize(); }

  /// Content hash of the resolved configuration; output locations are excluded
  /// so a relocated experiment keeps its provenance.
  std::string fingerprint() const {
    Fnv1a f;
    f.update(to_header(false).serialize());
    return hex64(f.digest());
  }

  std::string events_string() const {
    if (events_from_manifest) return "from-manifest";
    std::string s;
    for (std::size_t i = 0; i < events.size(); ++i) s += (i ? "," : "") + event_key(events[i]);
    return s;
  }

  /// Sets one `section.key`; used by the parser and by command-line overrides.
  void set(const std::string& key, const std::string& value);

  static ExperimentConfig parse(std::string_view text, const std::string& origin = "config");
  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Io, "cannot open config ", path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    auto cfg = parse(ss.str(), path.string());
    return cfg;
  }
};

namespace detail {

inline std::size_t to_size(const std::string& v, const std::string& key) {
  const auto x = TextHeader::parse_int(v, key);
  if (x < 0) fail(ErrorKind::Config, key, " must be non-negative, got ", v);
  return static_cast<std::size_t>(x);
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  fail(ErrorKind::Config, key, " expects a boolean, got '", v, "'");
}

inline EventLabel parse_event(std::string_view s) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) fail(ErrorKind::Config, "event '", s, "' must be <year>:<onset day>");
  EventLabel e;
  e.year = static_cast<int>(TextHeader::parse_int(s.substr(0, colon), "event year"));
  const auto d = TextHeader::parse_int(s.substr(colon + 1), "event day");
  if (d < 0) fail(ErrorKind::Config, "event day must be non-negative in '", s, "'");
  e.onset_day = static_cast<std::size_t>(d);
  return e;
}

inline std::vector<int> parse_leads(const std::string& v) {
  std::vector<int> out;
  for (const auto& t : split(v, ','))
    if (!trim(t).empty()) out.push_back(static_cast<int>(TextHeader::parse_int(t, "evaluate.leads")));
  return out;
}

}  // namespace detail

inline EventLabel parse_event(std::string_view s) { return detail::parse_event(s); }

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  using detail::to_bool;
  using detail::to_size;
  const auto num = [&] { return TextHeader::parse_double(value, key); };
  const auto sz = [&] { return to_size(value, key); };
  const auto u64 = [&] { return static_cast<std::uint64_t>(TextHeader::parse_int(value, key)); };

  auto& s = synth;
  if (key == "paths.archive") archive_dir = value;
  else if (key == "paths.checkpoints") checkpoint_dir = value;
  else if (key == "paths.ensembles") ensemble_dir = value;
  else if (key == "paths.reports") report_dir = value;
  else if (key == "grid.grid") s.grid = GridSpec::parse(value);
  else if (key == "grid.n_lat") s.grid = GridSpec::regular(sz(), s.grid.n_lon, s.grid.lat_step_deg, s.grid.lat_start_deg);
  else if (key == "grid.n_lon") s.grid = GridSpec::regular(s.grid.n_lat, sz(), s.grid.lat_step_deg, s.grid.lat_start_deg);
  else if (key == "grid.lat_step") s.grid.lat_step_deg = num();
  else if (key == "grid.lat_start") s.grid.lat_start_deg = num();
  else if (key == "grid.channels") {
    s.layout = ChannelLayout::from_names(split(value, ','));
    net.in_channels = s.layout.size();
  } else if (key == "synth.first_year") first_year = static_cast<int>(TextHeader::parse_int(value, key));
  else if (key == "synth.last_year") last_year = static_cast<int>(TextHeader::parse_int(value, key));
  else if (key == "synth.max_reseeds") max_reseeds = sz();
  else if (key == "synth.jet_speed") s.jet_speed = num();
  else if (key == "synth.jet_lat") s.jet_lat = num();
  else if (key == "synth.jet_width") s.jet_width = num();
  else if (key == "synth.wave1_amp") s.wave1_amp = num();
  else if (key == "synth.wave2_amp") s.wave2_amp = num();
  else if (key == "synth.reversion") s.reversion = num();
  else if (key == "synth.noise") s.noise = num();
  else if (key == "synth.coupling") s.coupling = num();
  else if (key == "synth.trigger_prob") s.trigger_prob = num();
  else if (key == "synth.season_length") s.season_length = sz();
  else if (key == "synth.seed") s.seed = u64();
  else if (key == "synth.activity_reversion") s.activity_reversion = num();
  else if (key == "synth.activity_noise") s.activity_noise = num();
  else if (key == "synth.episode_peak") s.episode_peak = num();
  else if (key == "synth.episode_days") s.episode_days = sz();
  else if (key == "synth.persistent_days") s.persistent_days = sz();
  else if (key == "synth.trigger_first") s.trigger_first = sz();
  else if (key == "synth.trigger_last") s.trigger_last = sz();
  else if (key == "synth.phase_drift") s.phase_drift = num();
  else if (key == "synth.phase_noise") s.phase_noise = num();
  else if (key == "synth.polar_warming") s.polar_warming = num();
  else if (key == "synth.field_noise") s.field_noise = num();
  else if (key == "net.in_channels") net.in_channels = sz();
  else if (key == "net.base_width") net.base_width = sz();
  else if (key == "net.mult") {
    const auto f = split(value, ',');
    if (f.size() != kLevels) fail(ErrorKind::Config, "net.mult needs ", kLevels, " comma-separated values");
    for (std::size_t l = 0; l < kLevels; ++l) net.mult[l] = to_size(f[l], key);
  } else if (key == "net.groups") net.groups = sz();
  else if (key == "net.emb_dim") net.emb_dim = sz();
  else if (key == "net.max_frequency") net.max_frequency = num();
  else if (key == "net.eps") net.eps = num();
  else if (key == "train.lr") train.lr = num();
  else if (key == "train.lr_decay") train.lr_decay = num();
  else if (key == "train.decay_period") train.decay_period = sz();
  else if (key == "train.batch_early") train.batch_early = sz();
  else if (key == "train.batch_late") train.batch_late = sz();
  else if (key == "train.batch_switch") train.batch_switch = sz();
  else if (key == "train.epochs") train.epochs = sz();
  else if (key == "train.weight_decay") train.weight_decay = num();
  else if (key == "train.seed") train.seed = u64();
  else if (key == "train.checkpoint_every") train.checkpoint_every = sz();
  else if (key == "train.max_steps_per_epoch") train.max_steps_per_epoch = sz();
  else if (key == "forecast.n_steps" || key == "forecast.steps") forecast.n_steps = sz();
  else if (key == "forecast.horizon") forecast.horizon = sz();
  else if (key == "forecast.members") forecast.members = sz();
  else if (key == "forecast.seed") forecast.seed = u64();
  else if (key == "forecast.perfect_troposphere") forecast.perfect_troposphere = to_bool(value, key);
  else if (key == "forecast.init_day") forecast.init_day = sz();
  else if (key == "forecast.integrator") forecast.integrator = parse_integrator(value);
  else if (key == "evaluate.events") {
    events.clear();
    events_from_manifest = trim(value) == "from-manifest";
    if (!events_from_manifest)
      for (const auto& t : split(value, ','))
        if (!trim(t).empty()) events.push_back(detail::parse_event(trim(t)));
  } else if (key == "evaluate.leads") leads = detail::parse_leads(value);
  else if (key == "evaluate.selection_lead") selection_lead = static_cast<int>(TextHeader::parse_int(value, key));
  else if (key == "evaluate.selection_members") selection_members = sz();
  else fail(ErrorKind::Config, "unknown configuration key '", key, "'");
}

inline ExperimentConfig ExperimentConfig::parse(std::string_view text, const std::string& origin) {
  ExperimentConfig cfg;
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = std::string(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail(ErrorKind::Config, origin, ":", line_no, ": malformed section header '", t, "'");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto colon = t.find(':');
    if (colon == std::string::npos) fail(ErrorKind::Config, origin, ":", line_no, ": expected 'key: value', got '", t, "'");
    if (section.empty()) fail(ErrorKind::Config, origin, ":", line_no, ": key outside any [section]");
    const auto key = section + "." + trim(std::string_view(t).substr(0, colon));
    try {
      cfg.set(key, trim(std::string_view(t).substr(colon + 1)));
    } catch (const Error& e) {
      fail(ErrorKind::Config, origin, ":", line_no, ": ", e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace fmcast

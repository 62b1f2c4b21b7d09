// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmcast/checkpoint.hpp"
#include "fmcast/config.hpp"
#include "fmcast/forecast.hpp"
#include "fmcast/report.hpp"
#include "fmcast/synth.hpp"
#include "fmcast/tensor_io.hpp"
#include "fmcast/train.hpp"
#include "fmcast/verify.hpp"

namespace fmcast {

// ---------------------------------------------------------------------------
// On-disk artifacts
//
//   <archive>/season-YYYY.fmt   physical seasons
//   <archive>/manifest.csv      labelled events
//   <archive>/archive.txt       years and the synthesis seed actually used
//   <checkpoints>/stats.txt     normalization statistics of the training years
//   <checkpoints>/ckpt-eNNNN.fmc, loss_trace.csv, selection.csv
//   <any output dir>/run.log    timestamps; the only non-reproducible output

inline std::filesystem::path season_path(const std::filesystem::path& dir, int year) {
  return dir / ("season-" + std::to_string(year) + ".fmt");
}

inline TextHeader config_provenance(const ExperimentConfig& cfg) {
  TextHeader h;
  h.set("config_fingerprint", cfg.fingerprint());
  return h;
}

/// Appends one timestamped line to `<dir>/run.log`.
inline void log_run(const std::filesystem::path& dir, const std::string& what, double seconds) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "run.log", std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << " " << what << " " << std::fixed << std::setprecision(3) << seconds
     << "s\n";
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct Archive {
  std::vector<SeasonTensor> seasons;  // physical, ascending years
  std::vector<EventLabel> manifest;
  TextHeader meta;

  std::vector<int> years() const {
    std::vector<int> y;
    for (const auto& s : seasons) y.push_back(s.year);
    return y;
  }
  const SeasonTensor& season(int year) const {
    for (const auto& s : seasons)
      if (s.year == year) return s;
    fail(ErrorKind::Range, "archive has no season ", year);
  }
  bool has(int year) const {
    for (const auto& s : seasons)
      if (s.year == year) return true;
    return false;
  }
};

inline Archive load_archive(const std::filesystem::path& dir) {
  const auto meta_path = dir / "archive.txt";
  std::ifstream is(meta_path);
  if (!is) fail(ErrorKind::Io, "cannot open ", meta_path.string(), "; run synth first");
  std::stringstream ss;
  ss << is.rdbuf();
  Archive a;
  a.meta = TextHeader::parse(ss.str());
  const int lo = static_cast<int>(a.meta.get_int("first_year"));
  const int hi = static_cast<int>(a.meta.get_int("last_year"));
  for (int y = lo; y <= hi; ++y) a.seasons.push_back(load_tensor(season_path(dir, y)));
  a.manifest = read_manifest(dir / "manifest.csv");
  for (const auto& s : a.seasons)
    if (!(s.grid == a.seasons.front().grid) || !(s.layout == a.seasons.front().layout))
      fail(ErrorKind::Layout, "season ", s.year, " differs in grid or layout from season ", a.seasons.front().year);
  return a;
}

/// Leave-last-quarter-out: the held-out years serve for both validation and test.
inline PeriodSplit archive_split(const std::vector<int>& years) { return make_period_splits(years).front(); }

inline std::vector<SeasonTensor> seasons_of(const Archive& a, const std::vector<int>& years) {
  std::vector<SeasonTensor> out;
  for (int y : years) out.push_back(a.season(y));
  return out;
}

inline void save_stats(const std::filesystem::path& path, const NormStats& st, const GridSpec& grid) {
  TextHeader h;
  write_grid_layout(h, grid, st.layout);
  st.write(h);
  h.set("stats_fingerprint", st.fingerprint());
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  os << h.serialize();
}

inline NormStats load_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open ", path.string(), "; run train first");
  std::stringstream ss;
  ss << is.rdbuf();
  const auto h = TextHeader::parse(ss.str());
  const auto st = NormStats::read(h, ChannelLayout::read(h));
  if (st.fingerprint() != h.get("stats_fingerprint"))
    fail(ErrorKind::Provenance, path.string(), ": statistics do not match their fingerprint");
  return st;
}

/// Events of `years` whose onset leaves room for two condition days at `lead`.
inline std::vector<EventLabel> events_in(const std::vector<EventLabel>& manifest, const std::vector<int>& years,
                                         int lead) {
  std::vector<EventLabel> out;
  for (const auto& e : manifest)
    if (std::find(years.begin(), years.end(), e.year) != years.end() && e.onset_day >= static_cast<std::size_t>(lead) + 2)
      out.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthSummary {
  std::uint64_t seed = 0;  // the seed that satisfied the event guarantee
  std::size_t reseeds = 0;
  std::vector<EventLabel> events;
  std::vector<EventLabel> held_out_events;
};

/// The archive must hold a labelled event in the held-out years with room for
/// the selection lead; the synthesis seed is advanced until it does.
inline SynthSummary cmd_synth(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const Stopwatch sw;
  const auto split = archive_split([&] {
    std::vector<int> y;
    for (int i = cfg.first_year; i <= cfg.last_year; ++i) y.push_back(i);
    return y;
  }());
  SynthSummary sum;
  SynthParams p = cfg.synth;
  for (;; ++sum.reseeds) {
    if (sum.reseeds > cfg.max_reseeds)
      fail(ErrorKind::Degenerate, "no seed in ", cfg.synth.seed, "..", cfg.synth.seed + cfg.max_reseeds,
           " yields a held-out event");
    p.seed = cfg.synth.seed + sum.reseeds;
    sum.events = archive_events(p, cfg.first_year, cfg.last_year);
    sum.held_out_events = events_in(sum.events, split.test_years, cfg.selection_lead);
    if (!sum.held_out_events.empty()) break;
  }
  sum.seed = p.seed;

  std::error_code ec;
  std::filesystem::create_directories(cfg.archive_dir, ec);
  if (ec || !std::filesystem::is_directory(cfg.archive_dir))
    fail(ErrorKind::Io, "cannot create archive directory ", cfg.archive_dir.string());
  const auto prov = config_provenance(cfg);
  for (int y = cfg.first_year; y <= cfg.last_year; ++y) {
    const auto s = generate_season(p, y);
    save_tensor(season_path(cfg.archive_dir, y), s.season, &prov);
  }
  TextHeader meta = prov;
  meta.set_num("first_year", cfg.first_year);
  meta.set_num("last_year", cfg.last_year);
  meta.set_num("synth_seed", sum.seed);
  meta.set_num("reseeds", sum.reseeds);
  p.write(meta);
  write_manifest(cfg.archive_dir / "manifest.csv", sum.events, &prov);
  {
    std::ofstream os(cfg.archive_dir / "archive.txt", std::ios::trunc);
    os << meta.serialize();
    if (!os) fail(ErrorKind::Io, "write failed for ", (cfg.archive_dir / "archive.txt").string());
  }
  log << "archive " << cfg.first_year << "-" << cfg.last_year << " seed " << sum.seed << " (" << sum.reseeds
      << " reseeds): " << sum.events.size() << " events, " << sum.held_out_events.size() << " held out\n";
  for (const auto& e : sum.events) log << "  " << event_key(e) << " " << event_type_name(e.type) << "\n";
  log_run(cfg.archive_dir, "synth", sw.seconds());
  return sum;
}

// ---------------------------------------------------------------------------
// Validation scoring

/// Ensemble-mean ACC of the diagnostic u channel on the onset day, forecast
/// `lead` days ahead. Undefined ACC scores -1.
inline double onset_acc(const ModelParameters<float>& params, const SeasonTensor& normalized, const SeasonTensor& truth,
                        const Climatology& clim, const NormStats& stats, const EventLabel& ev, int lead,
                        ForecastConfig fc) {
  if (ev.onset_day < static_cast<std::size_t>(lead) + 2)
    fail(ErrorKind::Range, "event ", event_key(ev), " at lead ", lead, " leaves fewer than two condition days");
  fc.init_day = ev.onset_day - static_cast<std::size_t>(lead);
  fc.horizon = static_cast<std::size_t>(lead) + 1;
  fc.perfect_troposphere = false;
  const auto ens = forecast(params, normalized, fc, stats, false);
  const std::size_t u = ens.layout.diagnostic_u();
  const std::size_t k = static_cast<std::size_t>(lead);
  const auto phys = ens.physical();
  std::vector<double> mean(ens.grid.plane(), 0.0);
  for (const auto& m : phys) {
    const auto f = m.field(k, u);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += f[i] / static_cast<double>(phys.size());
  }
  return detail::acc_or_undefined(mean, truth.field(ev.onset_day, u), clim.field(u)).value_or(-1.0);
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  TrainResult result;
  SelectionResult selection;
  std::vector<EventLabel> validation_events;
  NormStats stats;
};

inline std::filesystem::path selected_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "selection.csv");
  if (!is) fail(ErrorKind::Io, "no checkpoint selection in ", dir.string(), "; run train first");
  std::string line;
  while (std::getline(is, line)) {
    const auto f = split(trim(line), ',');
    if (f.size() == 4 && f[3] == "1") return dir / f[0];
  }
  fail(ErrorKind::Format, (dir / "selection.csv").string(), " marks no selected checkpoint");
}

inline TrainSummary cmd_train(const ExperimentConfig& cfg, bool resume, std::ostream& log = std::cout) {
  cfg.validate();
  const Stopwatch sw;
  const auto archive = load_archive(cfg.archive_dir);
  const auto split = archive_split(archive.years());
  TrainSummary sum;
  const auto train_phys = seasons_of(archive, split.train_years);
  sum.stats = compute_norm_stats(train_phys);
  std::vector<SeasonTensor> train_norm;
  for (const auto& s : train_phys) train_norm.push_back(normalize(s, sum.stats));
  const TrainingSet data(std::move(train_norm));

  std::filesystem::create_directories(cfg.checkpoint_dir);
  save_stats(cfg.checkpoint_dir / "stats.txt", sum.stats, archive.seasons.front().grid);
  TextHeader prov = config_provenance(cfg);
  prov.set("stats_fingerprint", sum.stats.fingerprint());
  TrainOptions opts;
  opts.out_dir = cfg.checkpoint_dir;
  opts.resume = resume;
  opts.provenance = &prov;
  std::size_t last_epoch = static_cast<std::size_t>(-1);
  double epoch_loss = 0.0;
  std::size_t epoch_rows = 0;
  const auto flush = [&] {
    if (epoch_rows) log << "epoch " << last_epoch + 1 << " mean loss " << epoch_loss / static_cast<double>(epoch_rows) << "\n";
  };
  opts.on_step = [&](const LossRow& r) {
    if (r.epoch != last_epoch) {
      flush();
      last_epoch = r.epoch;
      epoch_loss = 0.0;
      epoch_rows = 0;
    }
    epoch_loss += r.loss;
    ++epoch_rows;
  };
  sum.result = train(data, cfg.net, cfg.train, opts);
  flush();
  if (sum.result.resumed_from_epoch) log << "resumed after epoch " << sum.result.resumed_from_epoch << "\n";

  sum.validation_events = events_in(archive.manifest, split.test_years, cfg.selection_lead);
  const auto clim = climatology(train_phys);
  std::map<int, SeasonTensor> val_norm;
  for (const auto& e : sum.validation_events)
    if (!val_norm.count(e.year)) val_norm.emplace(e.year, normalize(archive.season(e.year), sum.stats));
  ForecastConfig fc = cfg.forecast;
  fc.members = cfg.selection_members;
  sum.selection = select_checkpoint(
      list_checkpoints(cfg.checkpoint_dir), sum.validation_events,
      [&](const CheckpointCandidate& c, const std::vector<EventLabel>& events) {
        const auto ck = load_checkpoint(c.path);
        double total = 0.0;
        for (const auto& e : events)
          total += onset_acc(ck.params, val_norm.at(e.year), archive.season(e.year), clim, sum.stats, e,
                             cfg.selection_lead, fc);
        const double score = total / static_cast<double>(events.size());
        log << "checkpoint epoch " << c.epoch << " validation ACC " << score << "\n";
        return score;
      });
  {
    auto os = detail::open_csv(cfg.checkpoint_dir / "selection.csv", "checkpoint,epoch,score,selected", &prov);
    auto cands = list_checkpoints(cfg.checkpoint_dir);
    for (std::size_t i = 0; i < cands.size(); ++i)
      os << cands[i].path.filename().string() << "," << cands[i].epoch << ","
         << (sum.selection.scores.empty() ? "unscored" : detail::fmt(sum.selection.scores[i])) << ","
         << (cands[i].path == sum.selection.chosen.path ? 1 : 0) << "\n";
  }
  log << "selected " << sum.selection.chosen.path.filename().string() << " over " << sum.validation_events.size()
      << " validation events\n";
  log_run(cfg.checkpoint_dir, "train", sw.seconds());
  return sum;
}

// ---------------------------------------------------------------------------
// forecast

struct ForecastRequest {
  EventLabel event;
  int lead = 15;
  std::optional<std::filesystem::path> checkpoint;  // default: the selected one
  std::optional<std::filesystem::path> out;         // default: under the ensemble dir
  bool resume = false;                              // keep an existing matching ensemble
};

inline std::string ensemble_name(const EventLabel& e, int lead, bool perfect) {
  return "ens-" + std::to_string(e.year) + "-" + std::to_string(e.onset_day) + "-lead" + std::to_string(lead) +
         (perfect ? "-pt" : "") + ".fme";
}

inline std::filesystem::path cmd_forecast(const ExperimentConfig& cfg, const ForecastRequest& req,
                                          std::ostream& log = std::cout) {
  cfg.validate();
  const Stopwatch sw;
  if (req.lead < 1) fail(ErrorKind::Config, "lead must be positive, got ", req.lead);
  if (req.event.onset_day < static_cast<std::size_t>(req.lead) + 2)
    fail(ErrorKind::Range, "lead ", req.lead, " is too large for event ", event_key(req.event),
         ": initialization needs two earlier days in the season");
  const auto ck_path = req.checkpoint ? *req.checkpoint : selected_checkpoint(cfg.checkpoint_dir);
  const auto stats = load_stats(cfg.checkpoint_dir / "stats.txt");
  auto ck = load_checkpoint(ck_path);
  if (const auto fp = ck.header.find("stats_fingerprint"); fp && *fp != stats.fingerprint())
    fail(ErrorKind::Provenance, ck_path.string(), " was trained with statistics ", *fp, ", stats.txt holds ",
         stats.fingerprint());

  ForecastConfig fc = cfg.forecast;
  fc.init_day = req.event.onset_day - static_cast<std::size_t>(req.lead);
  const auto out = req.out ? *req.out : cfg.ensemble_dir / ensemble_name(req.event, req.lead, fc.perfect_troposphere);

  TextHeader extra = config_provenance(cfg);
  extra.set("event", event_key(req.event));
  extra.set_num("lead", req.lead);
  extra.set("checkpoint", ck_path.filename().string());
  extra.set_num("checkpoint_epoch", ck.epoch);
  if (req.resume && std::filesystem::exists(out)) {
    TextHeader h;
    load_ensemble(out, &h);
    const auto same = [&](std::string_view k) { return h.find(k) == extra.find(k); };
    if (same("config_fingerprint") && same("event") && same("lead") && same("checkpoint")) {
      log << "kept " << out.string() << "\n";
      return out;
    }
  }

  const auto archive_dir = cfg.archive_dir;
  const auto season_file = season_path(archive_dir, req.event.year);
  if (!std::filesystem::exists(season_file)) {
    if (fc.perfect_troposphere)
      fail(ErrorKind::Intervention, "perfect-troposphere mode needs archive truth for ", req.event.year, ", missing ",
           season_file.string());
    fail(ErrorKind::Io, "archive has no season file ", season_file.string());
  }
  const auto season = normalize(load_tensor(season_file), stats);
  const auto ens = forecast(ck.params, season, fc, stats);
  std::filesystem::create_directories(out.parent_path().empty() ? "." : out.parent_path());
  save_ensemble(out, ens, &extra);
  log << "wrote " << out.string() << ": " << ens.members() << " members x " << ens.horizon() << " days from day "
      << fc.init_day << (fc.perfect_troposphere ? " (perfect troposphere)" : "") << "\n";
  log_run(out.parent_path().empty() ? "." : out.parent_path(), "forecast " + out.filename().string(), sw.seconds());
  return out;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateSummary {
  std::vector<VerificationReport> reports;
  AccuracyMatrix free_running, perfect_troposphere;
};

inline std::vector<std::filesystem::path> ensemble_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::Io, "ensemble directory ", dir.string(), " does not exist");
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".fme") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline EvaluateSummary cmd_evaluate(const ExperimentConfig& cfg, std::vector<std::filesystem::path> files,
                                    std::ostream& log = std::cout) {
  cfg.validate();
  const Stopwatch sw;
  if (files.empty()) files = ensemble_files(cfg.ensemble_dir);
  if (files.empty()) fail(ErrorKind::Io, "no ensemble files to evaluate");
  const auto archive = load_archive(cfg.archive_dir);
  const auto split = archive_split(archive.years());
  const auto stats = load_stats(cfg.checkpoint_dir / "stats.txt");
  const auto clim = climatology(seasons_of(archive, split.train_years));
  std::vector<EventLabel> wanted = cfg.events_from_manifest ? archive.manifest : cfg.events;

  EvaluateSummary sum;
  sum.free_running.leads = cfg.leads;
  sum.perfect_troposphere.leads = cfg.leads;
  const auto prov = config_provenance(cfg);
  std::filesystem::create_directories(cfg.report_dir);
  auto idx = detail::open_csv(cfg.report_dir / "reports.csv", "ensemble,event,lead,mode,strict,relaxed", &prov);
  for (const auto& f : files) {
    TextHeader h;
    const auto ens = load_ensemble(f, &h);
    check_provenance(ens, stats.fingerprint(), f.string());
    const auto key = h.find("event");
    if (!key) fail(ErrorKind::Format, f.string(), " carries no event label");
    auto ev = parse_event(*key);
    const auto it = std::find_if(wanted.begin(), wanted.end(), [&](const EventLabel& e) {
      return e.year == ev.year && e.onset_day == ev.onset_day;
    });
    if (it == wanted.end()) {
      log << "skipped " << f.filename().string() << ": event " << *key << " not requested\n";
      continue;
    }
    ev = *it;
    const auto r = build_report(ens, archive.season(ev.year), clim, ev);
    const bool perfect = !ens.replaced_channels.empty();
    write_report(cfg.report_dir / f.stem(), r, &prov);
    if (std::find(cfg.leads.begin(), cfg.leads.end(), *r.lead) != cfg.leads.end())
      (perfect ? sum.perfect_troposphere : sum.free_running).add(r);
    idx << f.filename().string() << "," << event_key(ev) << "," << *r.lead << ","
        << (perfect ? "perfect-troposphere" : "free") << "," << detail::fmt(*r.strict_accuracy) << ","
        << detail::fmt(*r.relaxed_accuracy) << "\n";
    log << f.filename().string() << ": event " << event_key(ev) << " lead " << *r.lead << " strict "
        << *r.strict_accuracy << "% relaxed " << *r.relaxed_accuracy << "%\n";
    sum.reports.push_back(r);
  }
  sum.free_running.write(cfg.report_dir / "table1.csv", &prov);
  if (!sum.perfect_troposphere.cells.empty())
    sum.perfect_troposphere.write(cfg.report_dir / "table1_perfect_troposphere.csv", &prov);
  log_run(cfg.report_dir, "evaluate", sw.seconds());
  return sum;
}

}  // namespace fmcast

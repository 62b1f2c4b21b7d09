// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fmcast/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Experiment configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a configuration value: section.key=value");
  app->add_option("--seed", c.seed, "Seed for this command's random streams");
  app->add_option("--out", c.out, "Output directory");
}

fmcast::ExperimentConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? fmcast::ExperimentConfig{} : fmcast::ExperimentConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fmcast::fail(fmcast::ErrorKind::Config, "--set expects section.key=value, got '", kv, "'");
    cfg.set(fmcast::trim(kv.substr(0, eq)), fmcast::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-matching ensemble forecasts of stratospheric polar vortex events"};
  app.require_subcommand(1);

  Common synth_opts, train_opts, forecast_opts, eval_opts;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic archive and its event manifest");
  add_common(synth, synth_opts);

  auto* train = app.add_subcommand("train", "Train the velocity network and select a checkpoint");
  add_common(train, train_opts);
  bool train_resume = false;
  train->add_flag("--resume", train_resume, "Continue from the last checkpoint");

  auto* fc = app.add_subcommand("forecast", "Run an ensemble forecast for one event and lead");
  add_common(fc, forecast_opts);
  std::string event;
  int lead = 15;
  std::optional<std::size_t> members, horizon, steps;
  std::optional<std::string> checkpoint;
  bool perfect = false, fc_resume = false;
  fc->add_option("--event", event, "Event as year:onset_day")->required();
  fc->add_option("--lead", lead, "Days from initialization to onset")->check(CLI::PositiveNumber);
  fc->add_option("--members", members, "Ensemble size")->check(CLI::PositiveNumber);
  fc->add_option("--horizon", horizon, "Forecast length in days")->check(CLI::PositiveNumber);
  fc->add_option("--steps", steps, "Integration steps per day")->check(CLI::PositiveNumber);
  fc->add_option("--checkpoint", checkpoint, "Checkpoint file; default is the selected one")->check(CLI::ExistingFile);
  fc->add_flag("--perfect-troposphere", perfect, "Replace tropospheric channels with archive truth each day");
  fc->add_flag("--resume", fc_resume, "Keep an existing ensemble produced by the same configuration");

  auto* ev = app.add_subcommand("evaluate", "Verify ensembles against the archive");
  add_common(ev, eval_opts);
  std::vector<std::string> files;
  ev->add_option("ensembles", files, "Ensemble files; default is every file in the ensemble directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      auto cfg = resolve(synth_opts);
      if (synth_opts.seed) cfg.synth.seed = *synth_opts.seed;
      if (synth_opts.out) cfg.archive_dir = *synth_opts.out;
      fmcast::cmd_synth(cfg);
    } else if (train->parsed()) {
      auto cfg = resolve(train_opts);
      if (train_opts.seed) cfg.train.seed = *train_opts.seed;
      if (train_opts.out) cfg.checkpoint_dir = *train_opts.out;
      fmcast::cmd_train(cfg, train_resume);
    } else if (fc->parsed()) {
      auto cfg = resolve(forecast_opts);
      if (forecast_opts.seed) cfg.forecast.seed = *forecast_opts.seed;
      if (forecast_opts.out) cfg.ensemble_dir = *forecast_opts.out;
      if (members) cfg.forecast.members = *members;
      if (horizon) cfg.forecast.horizon = *horizon;
      if (steps) cfg.forecast.n_steps = *steps;
      if (perfect) cfg.forecast.perfect_troposphere = true;
      fmcast::ForecastRequest req;
      req.event = fmcast::parse_event(event);
      req.lead = lead;
      if (checkpoint) req.checkpoint = *checkpoint;
      req.resume = fc_resume;
      fmcast::cmd_forecast(cfg, req);
    } else if (ev->parsed()) {
      auto cfg = resolve(eval_opts);
      if (eval_opts.out) cfg.report_dir = *eval_opts.out;
      std::vector<std::filesystem::path> paths(files.begin(), files.end());
      fmcast::cmd_evaluate(cfg, paths);
    }
  } catch (const fmcast::Error& e) {
    std::cerr << "fmcast: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fmcast: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmcast/checkpoint.hpp"
#include "fmcast/season.hpp"
#include "fmcast/synth.hpp"

namespace fmcast {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.5;
  std::size_t decay_period = 30;  // epochs
  std::size_t batch_early = 16;
  std::size_t batch_late = 8;
  std::size_t batch_switch = 30;  // first epoch using batch_late
  std::size_t epochs = 100;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 10;  // epochs; the final epoch is always saved
  std::size_t max_steps_per_epoch = 0;  // 0 = every target once

  void validate() const {
    if (!(lr > 0.0)) fail(ErrorKind::Config, "learning rate must be positive, got ", lr);
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail(ErrorKind::Config, "lr decay must lie in (0,1], got ", lr_decay);
    if (epochs < 1) fail(ErrorKind::Config, "epochs must be at least 1");
    if (decay_period < 1) fail(ErrorKind::Config, "decay period must be at least 1 epoch");
    if (batch_early < 1 || batch_late < 1) fail(ErrorKind::Config, "batch sizes must be positive");
    if (weight_decay < 0.0) fail(ErrorKind::Config, "weight decay must be non-negative");
    if (checkpoint_every < 1) fail(ErrorKind::Config, "checkpoint cadence must be at least 1 epoch");
  }

  void write(TextHeader& h) const {
    h.set_num("train.lr", lr);
    h.set_num("train.lr_decay", lr_decay);
    h.set_num("train.decay_period", decay_period);
    h.set_num("train.batch_early", batch_early);
    h.set_num("train.batch_late", batch_late);
    h.set_num("train.batch_switch", batch_switch);
    h.set_num("train.epochs", epochs);
    h.set_num("train.weight_decay", weight_decay);
    h.set_num("train.seed", seed);
    h.set_num("train.max_steps_per_epoch", max_steps_per_epoch);
  }
};

inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.decay_period));
}

inline std::size_t batch_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return epoch < cfg.batch_switch ? cfg.batch_early : cfg.batch_late;
}

/// x_t = t x1 + (1 - t) x0 with one noise level per sample.
template <class T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, const std::vector<double>& t) {
  require_same_shape(x0, x1, "interpolate");
  if (t.size() != x0.shape().n) fail(ErrorKind::Shape, "got ", t.size(), " noise levels for a batch of ", x0.shape().n);
  const std::size_t per = x0.size() / std::max<std::size_t>(1, x0.shape().n);
  Tensor<T> out(x0.shape());
  for (std::size_t n = 0; n < t.size(); ++n) {
    check_noise_level(t[n]);
    const T tn = static_cast<T>(t[n]);
    const T sn = static_cast<T>(1.0 - t[n]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = tn * x1[i] + sn * x0[i];
  }
  return out;
}

template <class T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  return interpolate(x0, x1, std::vector<double>(x0.shape().n, t));
}

/// Anything mapping (tape, x_t, t, cond) to a velocity with x_t's shape.
template <class F, class T>
concept VelocityModel = requires(F f, Tape<T>& tape, const Var<T>& x, const std::vector<double>& t, const Var<T>& c) {
  { f(tape, x, t, c) } -> std::convertible_to<Var<T>>;
};

/// The network as a VelocityModel.
template <class T>
struct NetVelocity {
  ParamBinder<T>& bind;
  Var<T> operator()(Tape<T>&, const Var<T>& x, const std::vector<double>& t, const Var<T>& c) const {
    return forward(bind, x, t, c);
  }
};

/// Mean over the batch of the per-sample mean squared velocity error against
/// (x1 - x0). Backward through the returned scalar yields the gradients.
template <class T, VelocityModel<T> F>
Var<T> fm_loss(Tape<T>& tape, F&& model, const Tensor<T>& x1, const Tensor<T>& cond, const Tensor<T>& x0,
               const std::vector<double>& t) {
  require_same_shape(x0, x1, "fm_loss");
  const auto xt = interpolate(x0, x1, t);
  Tensor<T> target(x1.shape());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = x1[i] - x0[i];
  const auto v = model(tape, tape.constant(xt), t, tape.constant_ref(cond));
  const auto loss = ops::mse(tape, v, target);
  if (!std::isfinite(static_cast<double>(loss.value()[0])))
    fail(ErrorKind::NonFinite, "flow-matching loss is not finite");
  return loss;
}

// ---------------------------------------------------------------------------
// Training data

/// Every (season, day) with two preceding days in the same season.
struct TrainingSet {
  std::vector<SeasonTensor> seasons;  // normalized
  std::vector<std::pair<std::size_t, std::size_t>> targets;

  explicit TrainingSet(std::vector<SeasonTensor> normalized) : seasons(std::move(normalized)) {
    if (seasons.empty()) fail(ErrorKind::Domain, "training set has no seasons");
    for (std::size_t s = 0; s < seasons.size(); ++s) {
      if (!seasons[s].normalized) fail(ErrorKind::Domain, "season ", seasons[s].year, " is not normalized");
      if (!(seasons[s].layout == seasons[0].layout) || !(seasons[s].grid == seasons[0].grid))
        fail(ErrorKind::Layout, "season ", seasons[s].year, " differs in grid or layout");
      for (std::size_t d = 2; d < seasons[s].days(); ++d) targets.emplace_back(s, d);
    }
    if (targets.empty()) fail(ErrorKind::Domain, "training set has no targets");
  }

  std::size_t channels() const { return seasons[0].channels(); }
  const GridSpec& grid() const { return seasons[0].grid; }

  /// Stacks targets (N, C, H, W) and conditions (N, 2C, H, W): day d-2 then d-1.
  void gather(std::span<const std::size_t> picks, Tensor<float>& x1, Tensor<float>& cond) const {
    const std::size_t per = channels() * grid().plane();
    x1 = Tensor<float>::uninitialized(Shape4{picks.size(), channels(), grid().n_lat, grid().n_lon});
    cond = Tensor<float>::uninitialized(Shape4{picks.size(), 2 * channels(), grid().n_lat, grid().n_lon});
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto [s, d] = targets[picks[i]];
      const auto& v = seasons[s].values;
      std::copy_n(v.data() + d * per, per, x1.data() + i * per);
      std::copy_n(v.data() + (d - 2) * per, per, cond.data() + 2 * i * per);
      std::copy_n(v.data() + (d - 1) * per, per, cond.data() + (2 * i + 1) * per);
    }
  }
};

/// Seeded noise and noise levels for one optimizer step.
template <class T>
void draw_step_noise(std::uint64_t seed, std::uint64_t step, const Shape4& shape, Tensor<T>& x0, std::vector<double>& t) {
  std::mt19937_64 rng(derive_seed(seed, step, 0x6e6f697365ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  t.resize(shape.n);
  for (auto& v : t) v = unif(rng);
  x0 = Tensor<T>::uninitialized(shape);
  for (auto& v : x0.vec()) v = static_cast<T>(gauss(rng));
}

/// Order of targets in one epoch.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, epoch, 0x73687566ULL));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  return order;
}

// ---------------------------------------------------------------------------
// Loss trace

struct LossRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // 1-based optimizer step
  double lr = 0.0;
  std::size_t batch = 0;
  double loss = 0.0;

  friend bool operator==(const LossRow&, const LossRow&) = default;
};

inline constexpr std::string_view kLossTraceHeader = "epoch,step,lr,batch,loss";

inline void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  os << kLossTraceHeader << "\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%llu,%.17g,%zu,%.17g\n", r.epoch, static_cast<unsigned long long>(r.step), r.lr,
                  r.batch, r.loss);
    os << buf;
  }
  if (!os) fail(ErrorKind::Io, "write failed for ", path.string());
}

inline std::vector<LossRow> read_loss_trace(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open loss trace ", path.string());
  std::string line;
  if (!std::getline(is, line) || trim(line) != kLossTraceHeader)
    fail(ErrorKind::Format, path.string(), ": missing loss trace header");
  std::vector<LossRow> rows;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 5) fail(ErrorKind::Format, path.string(), ": bad loss trace row '", line, "'");
    rows.push_back({static_cast<std::size_t>(TextHeader::parse_int(f[0])), static_cast<std::uint64_t>(TextHeader::parse_int(f[1])),
                    TextHeader::parse_double(f[2]), static_cast<std::size_t>(TextHeader::parse_int(f[3])),
                    TextHeader::parse_double(f[4])});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Training loop

struct CheckpointCandidate {
  std::filesystem::path path;
  std::size_t epoch = 0;  // epochs completed
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-e%04zu.fmc", epoch);
  return dir / buf;
}

/// Checkpoints in `dir` written by `train`, in epoch order.
inline std::vector<CheckpointCandidate> list_checkpoints(const std::filesystem::path& dir) {
  std::vector<CheckpointCandidate> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    unsigned long epoch = 0;
    char tail = 0;
    if (std::sscanf(name.c_str(), "ckpt-e%lu.fm%c", &epoch, &tail) == 2 && name.ends_with(".fmc") &&
        name == checkpoint_path("", epoch).string())
      out.push_back({e.path(), epoch});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  return out;
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool resume = false;
  const TextHeader* provenance = nullptr;  // merged into checkpoint headers
  std::function<void(const LossRow&)> on_step = {};
};

struct TrainResult {
  ModelParameters<float> params;
  AdamState<float> optimizer;
  std::vector<LossRow> trace;
  std::vector<CheckpointCandidate> checkpoints;
  std::size_t resumed_from_epoch = 0;
};

/// One optimizer step on a gathered batch; returns the loss.
inline double train_step(ModelParameters<float>& params, AdamState<float>& opt, const Tensor<float>& x1,
                         const Tensor<float>& cond, std::uint64_t seed, std::uint64_t step, double lr,
                         const AdamConfig& adam) {
  Tensor<float> x0;
  std::vector<double> t;
  draw_step_noise(seed, step, x1.shape(), x0, t);
  Tape<float> tape;
  ParamBinder<float> bind(tape, params, true);
  const auto loss = fm_loss(tape, NetVelocity<float>{bind}, x1, cond, x0, t);
  tape.backward(loss);
  optimizer_step(params, bind.gradients(), opt, lr, adam);
  return static_cast<double>(loss.value()[0]);
}

inline TrainResult train(const TrainingSet& data, const NetConfig& net, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  net.validate();
  if (net.in_channels != data.channels())
    fail(ErrorKind::Config, "net expects ", net.in_channels, " channels, data has ", data.channels());
  TrainResult r;
  r.params = init_parameters<float>(net, cfg.seed);
  std::uint64_t step = 0;
  std::size_t first_epoch = 0;
  const bool persist = !opts.out_dir.empty();
  const auto trace_path = opts.out_dir / "loss_trace.csv";
  if (persist) std::filesystem::create_directories(opts.out_dir);
  if (persist && opts.resume) {
    const auto found = list_checkpoints(opts.out_dir);
    if (!found.empty()) {
      auto ck = load_checkpoint(found.back().path);
      if (!(ck.params.config() == net)) fail(ErrorKind::Config, "checkpoint net config differs from the requested one");
      r.params = std::move(ck.params);
      if (ck.optimizer) r.optimizer = std::move(*ck.optimizer);
      step = ck.step;
      first_epoch = ck.epoch;
      r.resumed_from_epoch = ck.epoch;
      r.checkpoints = found;
      if (std::filesystem::exists(trace_path))
        for (const auto& row : read_loss_trace(trace_path))
          if (row.step <= step) r.trace.push_back(row);
      if (r.trace.size() != step)
        fail(ErrorKind::Format, trace_path.string(), " holds ", r.trace.size(), " rows up to step ", step);
    }
  }
  AdamConfig adam;
  adam.weight_decay = cfg.weight_decay;
  Tensor<float> x1, cond;
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, data.targets.size());
    const std::size_t batch = batch_schedule(epoch, cfg);
    const double lr = lr_schedule(epoch, cfg);
    std::size_t steps = (order.size() + batch - 1) / batch;
    if (cfg.max_steps_per_epoch) steps = std::min(steps, cfg.max_steps_per_epoch);
    for (std::size_t b = 0; b < steps; ++b) {
      const std::size_t lo = b * batch;
      const std::size_t hi = std::min(order.size(), lo + batch);
      data.gather(std::span<const std::size_t>(order).subspan(lo, hi - lo), x1, cond);
      ++step;
      const double loss = train_step(r.params, r.optimizer, x1, cond, cfg.seed, step, lr, adam);
      r.trace.push_back({epoch, step, lr, hi - lo, loss});
      if (opts.on_step) opts.on_step(r.trace.back());
    }
    const std::size_t done = epoch + 1;
    if (persist && (done % cfg.checkpoint_every == 0 || done == cfg.epochs)) {
      TextHeader extra;
      if (opts.provenance) extra = *opts.provenance;
      cfg.write(extra);
      const auto path = checkpoint_path(opts.out_dir, done);
      save_checkpoint(path, r.params, &r.optimizer, done, step, &extra);
      write_loss_trace(trace_path, r.trace);
      r.checkpoints.push_back({path, done});
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint selection

struct SelectionResult {
  CheckpointCandidate chosen;
  std::vector<double> scores;  // per candidate, empty when nothing was scored
};

/// Argmax of `score` over candidates; ties go to the earliest epoch.
template <class Scorer>
SelectionResult select_checkpoint(std::vector<CheckpointCandidate> candidates, const std::vector<EventLabel>& events,
                                  Scorer&& score) {
  if (candidates.empty()) fail(ErrorKind::Selection, "no checkpoints to select from");
  if (events.empty()) fail(ErrorKind::Selection, "checkpoint selection needs at least one validation event");
  std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  SelectionResult out{candidates.front(), {}};
  if (candidates.size() == 1) return out;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    const double s = score(c, events);
    out.scores.push_back(s);
    if (s > best) {
      best = s;
      out.chosen = c;
    }
  }
  return out;
}

}  // namespace fmcast

// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "fmcast/train.hpp"
#include "oracles.hpp"

namespace fmcast {
namespace {

using oracle::random_tensor;

NetConfig tiny_net(std::size_t channels) {
  NetConfig c;
  c.in_channels = channels;
  c.base_width = 4;
  c.groups = 2;
  c.emb_dim = 8;
  return c;
}

/// Returns x1 - x0 recovered from x_t and t; needs the pair, so it is bound per batch.
struct ExactStub {
  const Tensor<double>& target;
  Var<double> operator()(Tape<double>& tape, const Var<double>&, const std::vector<double>&, const Var<double>&) const {
    return tape.constant(target);
  }
};

struct ZeroStub {
  Var<double> operator()(Tape<double>& tape, const Var<double>& x, const std::vector<double>&,
                         const Var<double>&) const {
    return tape.constant(Tensor<double>(x.shape()));
  }
};

/// v = conv(x_t, k1) + conv(cond, k2): a small model whose loss has a direct loop oracle.
struct ConvStub {
  Var<double> k1, b1, k2, b2;
  Var<double> operator()(Tape<double>& tape, const Var<double>& x, const std::vector<double>&,
                         const Var<double>& c) const {
    return ops::add(tape, ops::conv2d(tape, x, k1, b1), ops::conv2d(tape, c, k2, b2));
  }
};

std::vector<double> uniform_t(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t(n);
  for (auto& v : t) v = u(rng);
  return t;
}

double direct_mse(const Tensor<double>& v, const Tensor<double>& x1, const Tensor<double>& x0) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = (x1[i] - x0[i]) - v[i];
    s += d * d;
  }
  return s / static_cast<double>(v.size());
}

TEST(Interpolate, Endpoints) {
  std::mt19937_64 rng(1);
  const auto x0 = random_tensor({2, 3, 4, 5}, rng);
  const auto x1 = random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  const auto mid = interpolate(Tensor<double>({1, 1, 2, 2}), Tensor<double>({1, 1, 2, 2}, 2.0), 0.5);
  for (double v : mid.vec()) EXPECT_EQ(v, 1.0);
  EXPECT_THROW(interpolate(x0, Tensor<double>({2, 3, 4, 4}), 0.5), Error);
  EXPECT_THROW(interpolate(x0, x1, 1.5), Error);
}

TEST(FmLoss, ExactStubGivesZero) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Shape4 s{3, 2, 4, 6};
    const auto x0 = random_tensor(s, rng), x1 = random_tensor(s, rng), cond = random_tensor({3, 4, 4, 6}, rng);
    Tensor<double> target(s);
    for (std::size_t i = 0; i < s.numel(); ++i) target[i] = x1[i] - x0[i];
    Tape<double> tape;
    EXPECT_LT(fm_loss(tape, ExactStub{target}, x1, cond, x0, uniform_t(3, rng)).value()[0], 1e-12);
  }
}

TEST(FmLoss, ZeroOutputIsMeanSquaredDisplacement) {
  std::mt19937_64 rng(3);
  const Shape4 s{4, 3, 5, 6};
  const auto x0 = random_tensor(s, rng), x1 = random_tensor(s, rng), cond = random_tensor({4, 6, 5, 6}, rng);
  Tape<double> tape;
  const double loss = fm_loss(tape, ZeroStub{}, x1, cond, x0, uniform_t(4, rng)).value()[0];
  EXPECT_NEAR(loss, direct_mse(Tensor<double>(s), x1, x0), 1e-14);
}

TEST(FmLoss, MatchesExpressionOracleOnRandomShapes) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> nb(1, 3), ch(1, 3), sp(2, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape4 s{nb(rng), ch(rng), sp(rng), sp(rng) + 1};
    const Shape4 cs{s.n, 2 * s.c, s.h, s.w};
    const auto x0 = random_tensor(s, rng), x1 = random_tensor(s, rng), cond = random_tensor(cs, rng);
    auto k1 = random_tensor({s.c, s.c, 3, 3}, rng), b1 = random_tensor({1, s.c, 1, 1}, rng);
    auto k2 = random_tensor({s.c, cs.c, 1, 3}, rng), b2 = random_tensor({1, s.c, 1, 1}, rng);
    const auto t = uniform_t(s.n, rng);

    Tape<double> tape;
    ConvStub stub{tape.leaf_ref(k1), tape.leaf_ref(b1), tape.leaf_ref(k2), tape.leaf_ref(b2)};
    const auto loss = fm_loss(tape, stub, x1, cond, x0, t);
    tape.backward(loss);

    const auto oracle_loss = [&] {
      Tensor<double> xt(s);
      const std::size_t per = s.numel() / s.n;
      for (std::size_t i = 0; i < s.numel(); ++i) xt[i] = t[i / per] * x1[i] + (1.0 - t[i / per]) * x0[i];
      auto v = oracle::conv2d(xt, k1, &b1, 1);
      const auto vc = oracle::conv2d(cond, k2, &b2, 1);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += vc[i];
      return direct_mse(v, x1, x0);
    };
    const double want = oracle_loss();
    EXPECT_LT(std::abs(loss.value()[0] - want) / want, 1e-10) << trial;
    EXPECT_LT(oracle::norm_rel_error(stub.k1.grad(), oracle::finite_difference(oracle_loss, k1)), 1e-3);
    EXPECT_LT(oracle::norm_rel_error(stub.k2.grad(), oracle::finite_difference(oracle_loss, k2)), 1e-3);
    EXPECT_LT(oracle::norm_rel_error(stub.b1.grad(), oracle::finite_difference(oracle_loss, b1)), 1e-3);
  }
}

TEST(FmLoss, TinyNetworkMatchesInferenceForwardOracle) {
  std::mt19937_64 rng(5);
  const auto cfg = tiny_net(2);
  const auto params = init_parameters<double>(cfg, 11);
  const Shape4 s{2, 2, 8, 8};
  const auto x0 = random_tensor(s, rng), x1 = random_tensor(s, rng), cond = random_tensor({2, 4, 8, 8}, rng);
  const std::vector<double> t{0.25, 0.8};
  Tape<double> tape;
  ParamBinder<double> bind(tape, params, true);
  const double loss = fm_loss(tape, NetVelocity<double>{bind}, x1, cond, x0, t).value()[0];
  const auto v = forward(params, interpolate(x0, x1, t), t, cond);
  const double want = direct_mse(v, x1, x0);
  EXPECT_LT(std::abs(loss - want) / want, 1e-10);
}

TEST(FmLoss, NonFiniteLossAborts) {
  const Shape4 s{1, 1, 2, 2};
  Tensor<double> x1(s, 1.0), x0(s), cond({1, 2, 2, 2});
  x1[0] = std::numeric_limits<double>::infinity();
  Tape<double> tape;
  try {
    fm_loss(tape, ZeroStub{}, x1, cond, x0, {0.5});
    FAIL() << "expected a non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
  }
}

TEST(Optimizer, DecayOnlyStep) {
  ModelParameters<double> p(tiny_net(1));
  for (auto& e : p.entries()) e.value.fill(0.5);
  AdamState<double> st;
  std::vector<Tensor<double>> g;
  for (const auto& e : p.entries()) g.emplace_back(e.value.shape());
  optimizer_step(p, g, st, 1e-4, AdamConfig{});
  for (const auto& e : p.entries())
    for (double w : e.value.vec()) EXPECT_DOUBLE_EQ(w, e.spec.decay ? 0.5 * (1.0 - 1e-8) : 0.5) << e.spec.name;
}

TEST(Optimizer, ConstantGradientStepConvergesToLr) {
  Tensor<double> w({1, 1, 1, 1}, 0.0);
  AdamState<double> st;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  double prev = 0.0, step = 0.0;
  for (int k = 0; k < 20000; ++k) {
    adam_update<double>({&w}, {false}, {Tensor<double>({1, 1, 1, 1}, 0.3)}, st, 1e-3, cfg);
    step = prev - w[0];
    prev = w[0];
  }
  EXPECT_NEAR(step, 1e-3, 1e-8);
}

TEST(Optimizer, FirstStepMatchesHandRecursion) {
  Tensor<double> w({1, 1, 1, 1}, 2.0);
  AdamState<double> st;
  AdamConfig cfg;
  adam_update<double>({&w}, {true}, {Tensor<double>({1, 1, 1, 1}, 1.0)}, st, 1e-2, cfg);
  const double m = 0.1, v = 0.001;
  const double mh = m / 0.1, vh = v / 0.001;
  EXPECT_DOUBLE_EQ(w[0], 2.0 - 1e-2 * (mh / (std::sqrt(vh) + 1e-8) + 1e-4 * 2.0));
  EXPECT_THROW(adam_update<double>({&w}, {true}, {Tensor<double>({1, 1, 1, 1}, NAN)}, st, 1e-2, cfg), Error);
}

TEST(Schedule, MatchesPublishedValues) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_schedule(0, cfg), 1e-4);
  EXPECT_EQ(batch_schedule(0, cfg), 16u);
  EXPECT_EQ(lr_schedule(29, cfg), 1e-4);
  EXPECT_EQ(batch_schedule(29, cfg), 16u);
  EXPECT_EQ(lr_schedule(30, cfg), 5e-5);
  EXPECT_EQ(batch_schedule(30, cfg), 8u);
  EXPECT_EQ(lr_schedule(60, cfg), 2.5e-5);
  EXPECT_EQ(cfg.epochs, 100u);
  EXPECT_EQ(cfg.weight_decay, 1e-4);
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig c;
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), Error);
}

std::vector<SeasonTensor> tiny_archive(std::size_t years, std::size_t length, std::size_t channels = 2) {
  std::vector<SeasonTensor> out;
  std::mt19937_64 rng(9);
  std::normal_distribution<float> g(0.0f, 1.0f);
  const auto layout = channels == 2 ? ChannelLayout::from_names({"u@10", "T@10"}) : ChannelLayout::desk();
  for (std::size_t y = 0; y < years; ++y) {
    auto s = SeasonTensor::zeros(2000 + static_cast<int>(y), GridSpec::regular(8, 8), layout, length);
    for (std::size_t d = 0; d < length; ++d)
      for (std::size_t c = 0; c < s.channels(); ++c) {
        auto f = s.field(d, c);
        for (std::size_t i = 0; i < f.size(); ++i)
          f[i] = std::sin(0.3f * static_cast<float>(d) + static_cast<float>(i % 8) + static_cast<float>(c)) +
                 0.1f * g(rng);
      }
    s.normalized = true;
    out.push_back(std::move(s));
  }
  return out;
}

TEST(TrainingSet, FirstTwoDaysNeverTargetsAndConditionOrder) {
  const TrainingSet ts(tiny_archive(3, 10));
  EXPECT_EQ(ts.targets.size(), 3u * 8u);
  for (const auto& [s, d] : ts.targets) EXPECT_GE(d, 2u);
  const std::vector<std::size_t> pick{5};
  Tensor<float> x1, cond;
  ts.gather(pick, x1, cond);
  const auto [s, d] = ts.targets[5];
  const auto& season = ts.seasons[s];
  const std::size_t per = season.channels() * season.grid.plane();
  EXPECT_TRUE(std::equal(x1.vec().begin(), x1.vec().end(), season.day(d).begin()));
  EXPECT_TRUE(std::equal(cond.data(), cond.data() + per, season.day(d - 2).begin()));
  EXPECT_TRUE(std::equal(cond.data() + per, cond.data() + 2 * per, season.day(d - 1).begin()));
}

TEST(TrainingSet, RejectsPhysicalSeasons) {
  auto a = tiny_archive(1, 10);
  a[0].normalized = false;
  EXPECT_THROW(TrainingSet{a}, Error);
}

TEST(Train, EpochOrderIsAPermutation) {
  const auto o = epoch_order(3, 7, 100);
  EXPECT_EQ(std::set<std::size_t>(o.begin(), o.end()).size(), 100u);
  EXPECT_NE(o, epoch_order(3, 8, 100));
  EXPECT_EQ(o, epoch_order(3, 7, 100));
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig c;
  c.lr = 2e-3;
  c.epochs = epochs;
  c.batch_early = 4;
  c.batch_late = 4;
  c.checkpoint_every = 1;
  c.seed = 17;
  return c;
}

TEST(Train, LossDecreasesOver200Steps) {
  const TrainingSet ts(tiny_archive(4, 52));  // 200 targets, 50 steps per epoch
  const auto r = train(ts, tiny_net(2), quick_config(4));
  ASSERT_EQ(r.trace.size(), 200u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += r.trace[i].loss;
    last += r.trace[150 + i].loss;
  }
  EXPECT_LT(last, first);
}

TEST(Train, IdenticalSeedsGiveIdenticalTracesAndCheckpoints) {
  const TrainingSet ts(tiny_archive(2, 12));
  const auto dir = std::filesystem::temp_directory_path() / "fmcast_train_det";
  std::filesystem::remove_all(dir);
  const auto a = train(ts, tiny_net(2), quick_config(2), TrainOptions{.out_dir = dir / "a"});
  const auto b = train(ts, tiny_net(2), quick_config(2), TrainOptions{.out_dir = dir / "b"});
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_TRUE(a.params == b.params);
  const auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  ASSERT_EQ(a.checkpoints.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(slurp(a.checkpoints[i].path), slurp(b.checkpoints[i].path));
  EXPECT_EQ(slurp(dir / "a" / "loss_trace.csv"), slurp(dir / "b" / "loss_trace.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Train, ResumeContinuesBitIdentically) {
  const TrainingSet ts(tiny_archive(2, 12));
  const auto dir = std::filesystem::temp_directory_path() / "fmcast_train_resume";
  std::filesystem::remove_all(dir);
  const auto full = train(ts, tiny_net(2), quick_config(3), TrainOptions{.out_dir = dir / "full"});
  train(ts, tiny_net(2), quick_config(2), TrainOptions{.out_dir = dir / "part"});
  TrainOptions resume{.out_dir = dir / "part"};
  resume.resume = true;
  const auto rest = train(ts, tiny_net(2), quick_config(3), resume);
  EXPECT_EQ(rest.resumed_from_epoch, 2u);
  EXPECT_EQ(rest.trace, full.trace);
  EXPECT_TRUE(rest.params == full.params);
  EXPECT_EQ(read_loss_trace(dir / "part" / "loss_trace.csv"), full.trace);
  EXPECT_EQ(list_checkpoints(dir / "part").size(), 3u);
  std::filesystem::remove_all(dir);
}

TEST(Train, LossTraceRoundTripAndRowCount) {
  const TrainingSet ts(tiny_archive(2, 12));  // 20 targets, batch 4 -> 5 steps
  const auto dir = std::filesystem::temp_directory_path() / "fmcast_train_trace";
  std::filesystem::remove_all(dir);
  const auto r = train(ts, tiny_net(2), quick_config(2), TrainOptions{.out_dir = dir});
  EXPECT_EQ(r.trace.size(), 10u);
  EXPECT_EQ(read_loss_trace(dir / "loss_trace.csv"), r.trace);
  std::filesystem::remove_all(dir);
}

TEST(SelectCheckpoint, ArgmaxTiesAndErrors) {
  const std::vector<EventLabel> ev{{2001, 80, EventType::CollapseRecover}};
  const std::vector<CheckpointCandidate> two{{"a", 10}, {"b", 20}};
  int calls = 0;
  const auto scores = [&](std::vector<double> s) {
    return [s, &calls](const CheckpointCandidate& c, const std::vector<EventLabel>&) {
      ++calls;
      return s[c.epoch / 10 - 1];
    };
  };
  EXPECT_EQ(select_checkpoint(two, ev, scores({0.4, 0.7})).chosen.epoch, 20u);
  EXPECT_EQ(select_checkpoint(two, ev, scores({0.5, 0.5})).chosen.epoch, 10u);
  EXPECT_EQ(select_checkpoint({two[1], two[0]}, ev, scores({0.5, 0.5})).chosen.epoch, 10u);
  calls = 0;
  EXPECT_EQ(select_checkpoint({two[1]}, ev, scores({0.0, 0.0})).chosen.epoch, 20u);
  EXPECT_EQ(calls, 0);
  try {
    select_checkpoint(two, {}, scores({0.4, 0.7}));
    FAIL() << "expected a selection error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Selection);
  }
}

}  // namespace
}  // namespace fmcast

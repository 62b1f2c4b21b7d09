// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <set>

#include "fmcast/forecast.hpp"
#include "oracles.hpp"

namespace fmcast {
namespace {

using oracle::random_tensor;

TEST(Sampler, ConstantVelocityIsExactForAnyStepCount) {
  std::mt19937_64 rng(1);
  const auto target = random_tensor({1, 3, 4, 5}, rng);
  for (std::size_t n : {1u, 5u, 20u, 7u}) {
    const auto x0 = standard_normal<double>(target.shape(), 99);
    Tensor<double> vel(target.shape());
    for (std::size_t i = 0; i < vel.size(); ++i) vel[i] = target[i] - x0[i];
    const auto x1 = sample_next_day<double>([&](const Tensor<double>&, double) { return vel; }, target.shape(), 99, n);
    EXPECT_LT(oracle::rel_error(x1, target), 1e-12) << n;
  }
}

TEST(Sampler, LinearDecayMatchesClosedForm) {
  const Shape4 s{1, 2, 3, 4};
  const auto x0 = standard_normal<double>(s, 5);
  const auto x = sample_next_day<double>(
      [](const Tensor<double>& y, double) {
        Tensor<double> v(y.shape());
        for (std::size_t i = 0; i < y.size(); ++i) v[i] = -y[i];
        return v;
      },
      s, 5, 20);
  const double f = std::pow(0.95, 20);
  EXPECT_NEAR(f, 0.3585, 1e-4);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], f * x0[i], 1e-9);
}

TEST(Sampler, ZeroFieldReturnsNoise) {
  const Shape4 s{1, 1, 2, 3};
  const auto x = sample_next_day<double>([](const Tensor<double>& y, double) { return Tensor<double>(y.shape()); }, s, 8, 20);
  EXPECT_EQ(x, standard_normal<double>(s, 8));
}

TEST(Sampler, MidpointIsSecondOrderOnLinearDecay) {
  const Shape4 s{1, 1, 1, 1};
  const auto v = [](const Tensor<double>& y, double) {
    Tensor<double> d(y.shape());
    d[0] = -y[0];
    return d;
  };
  const double x0 = standard_normal<double>(s, 3)[0];
  const double got = integrate<double>(v, standard_normal<double>(s, 3), 10, Integrator::Midpoint)[0];
  EXPECT_NEAR(got, std::pow(1.0 - 0.1 + 0.005, 10) * x0, 1e-12);
}

TEST(Sampler, NonFiniteStateNamesTheStep) {
  const Shape4 s{1, 1, 1, 2};
  try {
    integrate<double>(
        [](const Tensor<double>& y, double t) {
          Tensor<double> d(y.shape());
          if (t > 0.2) d[1] = std::numeric_limits<double>::infinity();
          return d;
        },
        Tensor<double>(s), 10);
    FAIL() << "expected an integration error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Integration);
    EXPECT_NE(std::string(e.what()).find("step 4 of 10"), std::string::npos) << e.what();
  }
}

TEST(MemberSeeds, DistinctStableAndDisjointAcrossMasters) {
  std::set<std::uint64_t> a, b;
  for (std::uint64_t m = 0; m < 50; ++m) {
    a.insert(derive_member_seed(42, m));
    b.insert(derive_member_seed(42 ^ 1, m));
    EXPECT_EQ(derive_member_seed(42, m), derive_member_seed(42, m));
  }
  EXPECT_EQ(a.size(), 50u);
  for (auto s : a) EXPECT_EQ(b.count(s), 0u);
}

TEST(ForecastConfig, DefaultsAndValidation) {
  const ForecastConfig c;
  EXPECT_EQ(c.n_steps, 20u);
  EXPECT_EQ(c.members, 50u);
  EXPECT_EQ(c.horizon, 30u);
  ForecastConfig bad;
  bad.init_day = 1;
  EXPECT_THROW(bad.validate(), Error);
  bad = ForecastConfig{};
  bad.n_steps = 0;
  EXPECT_THROW(bad.validate(), Error);
}

/// Small normalized season plus stats on a 8x8 grid with the desk layout.
struct Fixture {
  NormStats stats;
  SeasonTensor season;
  ModelParameters<float> params;

  Fixture() {
    auto s = SeasonTensor::zeros(2001, GridSpec::regular(8, 8), ChannelLayout::desk(), 20);
    std::mt19937_64 rng(3);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (auto& v : s.values.vec()) v = 1.0f + g(rng);
    stats = compute_norm_stats(std::vector<SeasonTensor>{s});
    season = normalize(s, stats);
    NetConfig net;
    net.in_channels = 6;
    net.base_width = 4;
    net.groups = 2;
    net.emb_dim = 8;
    params = init_parameters<float>(net, 5);
  }

  ForecastConfig config(std::size_t members, std::size_t horizon) const {
    ForecastConfig c;
    c.members = members;
    c.horizon = horizon;
    c.n_steps = 4;
    c.init_day = 5;
    c.seed = 11;
    return c;
  }
};

TEST(Forecast, AutoregressiveConditioningMatchesManualLoop) {
  const Fixture f;
  const auto cfg = f.config(2, 3);
  const auto ens = forecast(f.params, f.season, cfg, f.stats);
  ASSERT_EQ(ens.values.shape().n, 6u);
  const PackedParameters<float> packed(f.params);
  const std::size_t per = 6 * 64;
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<std::vector<float>> days{
        {f.season.day(3).begin(), f.season.day(3).end()},
        {f.season.day(4).begin(), f.season.day(4).end()}};
    for (std::size_t k = 0; k < 3; ++k) {
      Tensor<float> cond(Shape4{1, 12, 8, 8});
      std::copy_n(days[k].data(), per, cond.data());
      std::copy_n(days[k + 1].data(), per, cond.data() + per);
      const auto x = sample_next_day(f.params, packed, cond, derive_seed(ens.member_seeds[m], k, kDayNoiseDomain), 4);
      const auto st = ens.state(m, k);
      EXPECT_TRUE(std::equal(st.begin(), st.end(), x.data())) << m << "," << k;
      days.emplace_back(x.vec().begin(), x.vec().end());
    }
  }
  EXPECT_EQ(ens.lead_of(2), 2u);
  EXPECT_EQ(ens.season_day(0), 5u);
  EXPECT_EQ(ens.calendar.front(), f.season.calendar[5]);
}

TEST(Forecast, DeterministicAndMembersDiffer) {
  const Fixture f;
  const auto a = forecast(f.params, f.season, f.config(3, 2), f.stats);
  const auto b = forecast(f.params, f.season, f.config(3, 2), f.stats);
  EXPECT_EQ(a.values, b.values);
  EXPECT_FALSE(std::equal(a.state(0, 1).begin(), a.state(0, 1).end(), a.state(1, 1).begin()));
}

TEST(Forecast, ChunkingAndThreadsAreBitIdentical) {
  const Fixture f;
  const auto cfg = f.config(5, 2);
  const auto in = season_inputs(f.season, cfg, f.stats);
  const auto whole = forecast(f.params, in, cfg, f.stats, 2001, f.season.grid, 5);
  const auto ones = forecast(f.params, in, cfg, f.stats, 2001, f.season.grid, 1);
  const auto twos = forecast(f.params, in, cfg, f.stats, 2001, f.season.grid, 2);
  EXPECT_EQ(whole.values, ones.values);
  EXPECT_EQ(whole.values, twos.values);
  setenv("FMCAST_THREADS", "3", 1);
  const auto threaded = forecast(f.params, in, cfg, f.stats, 2001, f.season.grid);
  unsetenv("FMCAST_THREADS");
  EXPECT_EQ(whole.values, threaded.values);
}

TEST(Forecast, PermutingSeedsPermutesMembers) {
  const Fixture f;
  const auto cfg = f.config(3, 2);
  const auto ens = forecast(f.params, f.season, cfg, f.stats);
  const auto in = season_inputs(f.season, cfg, f.stats);
  const PackedParameters<float> packed(f.params);
  const std::vector<std::uint64_t> reversed(ens.member_seeds.rbegin(), ens.member_seeds.rend());
  auto out = Tensor<float>::uninitialized(ens.values.shape());
  detail::run_members(f.params, packed, in, cfg, {}, 0, 3, reversed, out);
  const std::size_t per = 2 * 6 * 64;
  for (std::size_t m = 0; m < 3; ++m)
    EXPECT_TRUE(std::equal(out.data() + m * per, out.data() + (m + 1) * per, ens.state(2 - m, 0).begin())) << m;
}

TEST(Forecast, PerfectTroposphereInsertsTruthExactly) {
  const Fixture f;
  auto cfg = f.config(2, 4);
  cfg.perfect_troposphere = true;
  const auto ens = forecast(f.params, f.season, cfg, f.stats);
  ASSERT_EQ(ens.replaced_channels.size(), 4u);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t c : ens.replaced_channels) {
        const auto got = ens.field(m, k, c);
        const auto want = f.season.field(cfg.init_day + k, c);
        EXPECT_TRUE(std::equal(got.begin(), got.end(), want.begin()));
      }
  const auto free = forecast(f.params, f.season, f.config(2, 4), f.stats);
  EXPECT_EQ(free.replaced_channels.size(), 0u);
  const auto u = *ens.layout.find("u@10");
  EXPECT_FALSE(std::equal(ens.field(0, 1, u).begin(), ens.field(0, 1, u).end(), free.field(0, 1, u).begin()));
}

TEST(Forecast, InterventionErrors) {
  const Fixture f;
  auto cfg = f.config(1, 2);
  cfg.perfect_troposphere = true;
  const auto in = season_inputs(f.season, cfg, f.stats);
  try {
    forecast(f.params, in, cfg, f.stats, 2001, f.season.grid);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Intervention);
  }
  cfg.horizon = 30;
  try {
    forecast(f.params, f.season, cfg, f.stats);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Intervention);
  }
}

TEST(Forecast, PhysicalViewIsDenormalizedPayload) {
  const Fixture f;
  const auto ens = forecast(f.params, f.season, f.config(2, 2), f.stats);
  const auto phys = ens.member_physical(1);
  for (std::size_t c = 0; c < 6; ++c) {
    const auto n = ens.field(1, 1, c);
    const auto p = phys.field(1, c);
    const double shift = f.stats.layout[c].sign_meaningful ? 0.0 : f.stats.mean[c];
    for (std::size_t i = 0; i < n.size(); ++i)
      EXPECT_FLOAT_EQ(p[i], static_cast<float>(static_cast<double>(n[i]) * f.stats.stddev[c] + shift));
  }
}

TEST(EnsembleFile, RoundTripAndDeterministicBytes) {
  const Fixture f;
  auto cfg = f.config(2, 3);
  cfg.perfect_troposphere = true;
  const auto ens = forecast(f.params, f.season, cfg, f.stats);
  const auto dir = std::filesystem::temp_directory_path();
  save_ensemble(dir / "fmcast_ens_a.bin", ens);
  save_ensemble(dir / "fmcast_ens_b.bin", forecast(f.params, f.season, cfg, f.stats));
  const auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  EXPECT_EQ(slurp(dir / "fmcast_ens_a.bin"), slurp(dir / "fmcast_ens_b.bin"));
  const auto back = load_ensemble(dir / "fmcast_ens_a.bin");
  EXPECT_EQ(back.values, ens.values);
  EXPECT_EQ(back.member_seeds, ens.member_seeds);
  EXPECT_EQ(back.replaced_channels, ens.replaced_channels);
  EXPECT_EQ(back.calendar, ens.calendar);
  EXPECT_EQ(back.stats.fingerprint(), ens.stats.fingerprint());
  std::filesystem::remove(dir / "fmcast_ens_a.bin");
  std::filesystem::remove(dir / "fmcast_ens_b.bin");
}

TEST(NetField, CachedConditionPathMatchesFullNetwork) {
  const Fixture f;
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 6, 8, 8}, rng).cast<float>();
  const auto cond = random_tensor({2, 12, 8, 8}, rng).cast<float>();
  const PackedParameters<float> packed(f.params);
  NetField field(f.params, packed, cond);
  const auto fast = field(x, 0.3).cast<double>();
  const auto full = forward(f.params, x, {0.3, 0.3}, cond).cast<double>();
  EXPECT_LT(oracle::rel_error(fast, full), 1e-5);
}

}  // namespace
}  // namespace fmcast

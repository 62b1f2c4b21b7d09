// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fmcast/checkpoint.hpp"
#include "fmcast/net.hpp"
#include "fmcast/optimizer.hpp"
#include "oracles.hpp"

namespace fmcast {
namespace {

using oracle::random_tensor;

Tensor<double> sub(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> d(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

NetConfig tiny(std::size_t channels = 2) {
  NetConfig c;
  c.in_channels = channels;
  c.base_width = 4;
  c.groups = 2;
  c.emb_dim = 8;
  return c;
}

/// Randomizes every parameter, including the zero-initialized affine predictors.
ModelParameters<double> perturbed(const NetConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  auto p = init_parameters<double>(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& e : p.entries())
    for (auto& v : e.value.vec()) v += u(rng);
  return p;
}

TEST(Parameters, DeterministicInitAndCensus) {
  const auto cfg = tiny();
  EXPECT_EQ(init_parameters<float>(cfg, 3), init_parameters<float>(cfg, 3));
  EXPECT_FALSE(init_parameters<float>(cfg, 3) == init_parameters<float>(cfg, 4));
  // Hand count for C=2, widths (4,8,8,16), emb 8: embedding 144, signal encoder
  // 8704, attention 1088, condition encoder 7624, decoder 19040, output 74.
  EXPECT_EQ(init_parameters<float>(cfg, 1).count(), 36674u);
  const auto p = init_parameters<float>(cfg, 1);
  for (const auto& e : p.entries()) {
    if (e.spec.name.find(".norm") == std::string::npos || !e.spec.name.starts_with("sig")) continue;
    if (e.spec.name.ends_with(".w")) {
      for (float v : e.value.vec()) EXPECT_EQ(v, 0.0f);
    }
  }
}

TEST(NoiseEmbedding, SinusoidalFeaturesAndRange) {
  const auto cfg = tiny();
  const auto f0 = sinusoidal_features<double>(0.0, cfg);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(f0[k], 0.0);
    EXPECT_EQ(f0[4 + k], 1.0);
  }
  EXPECT_THROW(sinusoidal_features<double>(-0.01, cfg), Error);
  EXPECT_THROW(sinusoidal_features<double>(1.01, cfg), Error);
  const auto freqs = embedding_frequencies(cfg);
  EXPECT_DOUBLE_EQ(freqs.front(), 1.0);
  EXPECT_NEAR(freqs.back(), cfg.max_frequency, 1e-9);
}

TEST(NoiseEmbedding, DistinctAndLipschitz) {
  const auto cfg = tiny();
  const auto p = perturbed(cfg, 5);
  const auto e0 = noise_embedding(p, 0.0), eh = noise_embedding(p, 0.5), e1 = noise_embedding(p, 1.0);
  EXPECT_GT(oracle::max_abs(sub(e0, eh)), 0.0);
  EXPECT_GT(oracle::max_abs(sub(eh, e1)), 0.0);
  EXPECT_GT(std::abs(std::sqrt(dot(e0, e0)) - std::sqrt(dot(e1, e1))), 0.0);

  // |d emb/dt| <= ||W2||_F * max silu' * ||W1||_F * ||d feats/dt||, with
  // max silu' < 1.1 and ||d feats/dt|| <= sqrt(sum w_k^2).
  const auto fro = [](const Tensor<double>& w) { return std::sqrt(dot(w, w)); };
  double fs = 0.0;
  for (double w : embedding_frequencies(cfg)) fs += w * w;
  const double bound = fro(p.at("emb.fc2.w")) * 1.1 * fro(p.at("emb.fc1.w")) * std::sqrt(fs);
  const double h = 1e-6;
  for (double t = 0.0; t + h <= 1.0; t += 0.05) {
    const auto d = sub(noise_embedding(p, t + h), noise_embedding(p, t));
    EXPECT_LE(std::sqrt(dot(d, d)) / h, bound);
  }
}

TEST(AdaptiveNorm, IdentityAndConstantAffine) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({2, 4, 3, 5}, rng);
  const auto emb = random_tensor({2, 8, 1, 1}, rng);
  Tape<double> tape(false);
  Tensor<double> w({8, 8, 1, 1}), b({1, 8, 1, 1});
  for (std::size_t c = 0; c < 4; ++c) b[c] = 1.0;
  const auto y = adaptive_norm(tape, tape.constant(x), tape.constant(emb), tape.constant(w), tape.constant(b), 2, 1e-5);
  const auto plain = kernels::group_norm_forward<double>(x, 2, nullptr, nullptr, 1e-5, nullptr);
  EXPECT_LT(oracle::max_abs(sub(y.value(), plain)), 1e-12);

  Tensor<double> bc({1, 8, 1, 1});
  for (std::size_t c = 0; c < 4; ++c) bc[4 + c] = 0.5 + static_cast<double>(c);
  const auto yc = adaptive_norm(tape, tape.constant(x), tape.constant(emb), tape.constant(w), tape.constant(bc), 2, 1e-5);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (double v : yc.value().plane(n, c)) EXPECT_DOUBLE_EQ(v, 0.5 + static_cast<double>(c));

  Tensor<double> bad({6, 8, 1, 1}), badb({1, 6, 1, 1});
  EXPECT_THROW(adaptive_norm(tape, tape.constant(x), tape.constant(emb), tape.constant(bad), tape.constant(badb), 2, 1e-5),
               Error);
}

TEST(AdaptiveNorm, GradientWithRespectToEmbedding) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({2, 4, 3, 4}, rng);
  auto emb = random_tensor({2, 8, 1, 1}, rng);
  const auto w = random_tensor({8, 8, 1, 1}, rng), b = random_tensor({1, 8, 1, 1}, rng);
  const auto r = random_tensor({2, 4, 3, 4}, rng);
  Tape<double> tape;
  const auto e = tape.leaf_ref(emb);
  const auto y = adaptive_norm(tape, tape.constant(x), e, tape.constant(w), tape.constant(b), 2, 1e-5);
  const auto loss = ops::weighted_sum(tape, y, r);
  tape.backward(loss);
  const auto fd = oracle::finite_difference(
      [&] {
        Tape<double> t2(false);
        return dot(adaptive_norm(t2, t2.constant(x), t2.constant(emb), t2.constant(w), t2.constant(b), 2, 1e-5).value(), r);
      },
      emb);
  EXPECT_LT(oracle::norm_rel_error(e.grad(), fd), 1e-3);
}

TEST(Forward, DeskShapeContract) {
  NetConfig cfg;  // desk defaults
  const auto p = init_parameters<float>(cfg, 2);
  std::mt19937_64 rng(8);
  const auto x = random_tensor({2, 6, 16, 24}, rng).cast<float>();
  const auto c = random_tensor({2, 12, 16, 24}, rng).cast<float>();
  const auto y = forward(p, x, {0.3, 0.7}, c);
  EXPECT_EQ(y.shape(), (Shape4{2, 6, 16, 24}));
  EXPECT_TRUE(y.all_finite());
  EXPECT_EQ(forward(p, x, {0.3, 0.7}, c), y);
  EXPECT_THROW(forward(p, x, {0.3}, c), Error);
  EXPECT_THROW(forward(p, x, {0.3, 1.5}, c), Error);
  EXPECT_THROW(forward(p, x, {0.3, 0.7}, random_tensor({2, 6, 16, 24}, rng).cast<float>()), Error);
}

TEST(Forward, OddGridKeepsShape) {
  const auto p = init_parameters<double>(tiny(3), 2);
  std::mt19937_64 rng(9);
  const auto y = forward(p, random_tensor({1, 3, 7, 10}, rng), {0.5}, random_tensor({1, 6, 7, 10}, rng));
  EXPECT_EQ(y.shape(), (Shape4{1, 3, 7, 10}));
}

Tensor<double> roll_lon(const Tensor<double>& x, std::size_t k) {
  Tensor<double> y(x.shape());
  const auto s = x.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) y(n, c, h, (w + k) % s.w) = x(n, c, h, w);
  return y;
}

TEST(Forward, ZonalShiftEquivariance) {
  // Three stride-2 levels make shifts by multiples of 8 columns exact symmetries.
  const auto p = perturbed(tiny(), 10, 0.1);
  std::mt19937_64 rng(11);
  const auto x = random_tensor({2, 2, 8, 24}, rng), c = random_tensor({2, 4, 8, 24}, rng);
  const std::vector<double> t{0.2, 0.9};
  const auto y = forward(p, x, t, c);
  for (std::size_t k : {8u, 16u}) {
    const auto ys = forward(p, roll_lon(x, k), t, roll_lon(c, k));
    EXPECT_LT(oracle::rel_error(ys, roll_lon(y, k)), 1e-5) << k;
  }
}

TEST(Forward, NoiseLevelChangesOutput) {
  const auto p = perturbed(tiny(), 12);
  std::mt19937_64 rng(13);
  const auto x = random_tensor({1, 2, 8, 8}, rng), c = random_tensor({1, 4, 8, 8}, rng);
  EXPECT_GT(oracle::max_abs(sub(forward(p, x, {0.1}, c), forward(p, x, {0.9}, c))), 0.0);
}

TEST(Forward, FullNetworkGradientsMatchFiniteDifferences) {
  const auto cfg = tiny();
  auto p = perturbed(cfg, 14, 0.2);
  std::mt19937_64 rng(15);
  const auto x = random_tensor({2, 2, 8, 8}, rng), c = random_tensor({2, 4, 8, 8}, rng);
  const auto r = random_tensor({2, 2, 8, 8}, rng);
  const std::vector<double> t{0.35, 0.8};
  const auto loss_of = [&] { return dot(forward(p, x, t, c), r); };

  Tape<double> tape;
  ParamBinder<double> bind(tape, p, true);
  const auto out = forward(bind, tape.constant_ref(x), t, tape.constant_ref(c));
  tape.backward(ops::weighted_sum(tape, out, r));
  const auto grads = bind.gradients();

  std::uniform_int_distribution<std::size_t> any;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& v = p.entries()[i].value;
    const std::size_t picks = std::min<std::size_t>(v.size(), 3);
    Tensor<double> analytic({1, picks, 1, 1}), numeric({1, picks, 1, 1});
    for (std::size_t j = 0; j < picks; ++j) {
      const std::size_t k = any(rng) % v.size();
      const double orig = v[k];
      v[k] = orig + 1e-4;
      const double up = loss_of();
      v[k] = orig - 1e-4;
      const double dn = loss_of();
      v[k] = orig;
      numeric[j] = (up - dn) / 2e-4;
      analytic[j] = grads[i][k];
    }
    EXPECT_LT(oracle::norm_rel_error(analytic, numeric), 1e-3) << p.entries()[i].spec.name;
    ++checked;
  }
  EXPECT_EQ(checked, p.size());
}

TEST(CheckpointFile, RoundTripWithOptimizerAndCorruption) {
  const auto cfg = tiny();
  const auto p = init_parameters<float>(cfg, 16);
  AdamState<float> opt;
  opt.step = 7;
  std::mt19937_64 rng(17);
  for (const auto& e : p.entries()) {
    opt.m.push_back(random_tensor(e.value.shape(), rng).cast<float>());
    opt.v.push_back(random_tensor(e.value.shape(), rng, 0.0, 1.0).cast<float>());
  }
  const auto path = std::filesystem::temp_directory_path() / "fmcast_net_ckpt.fmc";
  TextHeader extra;
  extra.set("seed_lineage", "16");
  save_checkpoint(path, p, &opt, 3, 42, &extra);
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.params, p);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 7u);
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    EXPECT_EQ(ck.optimizer->m[i], opt.m[i]);
    EXPECT_EQ(ck.optimizer->v[i], opt.v[i]);
  }
  EXPECT_EQ(ck.epoch, 3u);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_EQ(ck.header.get("seed_lineage"), "16");
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  EXPECT_THROW(load_checkpoint(path), Error);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace fmcast

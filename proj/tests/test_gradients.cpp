// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "fmcast/autodiff/ops.hpp"
#include "oracles.hpp"

namespace fmcast {
namespace {

using oracle::random_tensor;
using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Worst normwise relative error between tape gradients and central finite
/// differences of sum(w * f(inputs)) over all inputs.
double gradient_error(const Builder& f, std::vector<Tensor<double>> inputs, std::mt19937_64& rng) {
  Tensor<double> w;
  {
    Tape<double> probe(false);
    std::vector<Var<double>> c;
    for (const auto& in : inputs) c.push_back(probe.constant_ref(in));
    w = random_tensor(f(probe, c).shape(), rng);
  }
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.leaf_ref(in));
  tape.backward(ops::weighted_sum(tape, f(tape, leaves), w));

  const auto loss = [&] {
    Tape<double> t(false);
    std::vector<Var<double>> c;
    for (const auto& in : inputs) c.push_back(t.constant_ref(in));
    return ops::weighted_sum(t, f(t, c), w).value()[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto fd = oracle::finite_difference(loss, inputs[i], 1e-4);
    worst = std::max(worst, oracle::norm_rel_error(leaves[i].grad(), fd));
  }
  return worst;
}

constexpr int kCases = 20;
constexpr double kTol = 1e-4;

TEST(Gradients, Conv2dPeriodic) {
  std::mt19937_64 rng(100);
  std::uniform_int_distribution<std::size_t> d(1, 3), s(2, 5), kk(0, 1);
  for (int trial = 0; trial < kCases; ++trial) {
    const std::size_t stride = trial % 2 ? 2 : 1;
    const Shape4 xs{d(rng), d(rng), s(rng), s(rng) + 2};
    const Shape4 ks{d(rng), xs.c, 2 * kk(rng) + 1, 2 * kk(rng) + 1};
    const Builder f = [stride](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::conv2d(t, v[0], v[1], v[2], stride);
    };
    EXPECT_LT(gradient_error(f, {random_tensor(xs, rng), random_tensor(ks, rng), random_tensor({1, ks.n, 1, 1}, rng)}, rng),
              kTol)
        << trial;
  }
}

TEST(Gradients, GroupNormWithPerSampleAffine) {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> n(1, 3), g(1, 3), cpg(1, 3), s(1, 4);
  for (int trial = 0; trial < kCases; ++trial) {
    const std::size_t groups = g(rng);
    const Shape4 xs{n(rng), groups * cpg(rng), s(rng), s(rng) + 1};
    const bool broadcast = trial % 2 == 0;
    const Shape4 as{broadcast ? 1 : xs.n, xs.c, 1, 1};
    const Builder f = [groups](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::group_norm(t, v[0], groups, v[1], v[2], 1e-5);
    };
    EXPECT_LT(gradient_error(f, {random_tensor(xs, rng, -2, 2), random_tensor(as, rng), random_tensor(as, rng)}, rng),
              kTol)
        << trial;
  }
}

TEST(Gradients, SiluDenseUpsampleConcatSlice) {
  std::mt19937_64 rng(102);
  std::uniform_int_distribution<std::size_t> d(1, 4), s(1, 3);
  for (int trial = 0; trial < kCases; ++trial) {
    const Shape4 xs{d(rng), d(rng) + 1, s(rng), s(rng)};
    const std::size_t cout = d(rng);
    const Builder silu = [](Tape<double>& t, const std::vector<Var<double>>& v) { return ops::silu(t, v[0]); };
    EXPECT_LT(gradient_error(silu, {random_tensor(xs, rng, -3, 3)}, rng), kTol);

    const Builder dense = [](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::dense(t, v[0], v[1], v[2]);
    };
    const std::size_t cin = xs.c * xs.h * xs.w;
    EXPECT_LT(gradient_error(dense,
                             {random_tensor({xs.n, cin, 1, 1}, rng), random_tensor({cout, cin, 1, 1}, rng),
                              random_tensor({1, cout, 1, 1}, rng)},
                             rng),
              kTol);

    const bool crop = trial % 3 == 0;
    const Builder up = [crop](Tape<double>& t, const std::vector<Var<double>>& v) {
      const auto& sh = v[0].shape();
      return ops::upsample_nearest(t, v[0], 2 * sh.h - (crop ? 1 : 0), 2 * sh.w);
    };
    EXPECT_LT(gradient_error(up, {random_tensor(xs, rng)}, rng), kTol);

    const Builder cat = [](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::slice_channels(t, ops::concat_channels(t, {v[0], v[1]}), 1, v[0].shape().c);
    };
    EXPECT_LT(gradient_error(cat, {random_tensor(xs, rng), random_tensor({xs.n, 2, xs.h, xs.w}, rng)}, rng), kTol);
  }
}

TEST(Gradients, AttentionCoreAndBlock) {
  std::mt19937_64 rng(103);
  std::uniform_int_distribution<std::size_t> d(1, 3), s(1, 3);
  for (int trial = 0; trial < kCases; ++trial) {
    const Shape4 xs{d(rng), d(rng) + 1, s(rng), s(rng)};
    const Builder core = [](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::attention(t, v[0], v[1], v[2]);
    };
    EXPECT_LT(gradient_error(core, {random_tensor(xs, rng), random_tensor(xs, rng), random_tensor(xs, rng)}, rng), kTol);

    const Builder block = [](Tape<double>& t, const std::vector<Var<double>>& v) {
      ops::AttentionWeights<double> w{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
      return ops::self_attention(t, v[0], w);
    };
    std::vector<Tensor<double>> in{random_tensor(xs, rng)};
    for (int p = 0; p < 4; ++p) {
      in.push_back(random_tensor({xs.c, xs.c, 1, 1}, rng));
      in.push_back(random_tensor({1, xs.c, 1, 1}, rng));
    }
    EXPECT_LT(gradient_error(block, in, rng), kTol);
  }
}

TEST(Gradients, MseAndComposites) {
  std::mt19937_64 rng(104);
  for (int trial = 0; trial < kCases; ++trial) {
    const Shape4 xs{2, 3, 2, 4};
    const auto target = random_tensor(xs, rng);
    const Builder f = [&target](Tape<double>& t, const std::vector<Var<double>>& v) {
      return ops::mse(t, ops::add(t, ops::scale(t, v[0], 1.5), v[1]), target);
    };
    EXPECT_LT(gradient_error(f, {random_tensor(xs, rng), random_tensor(xs, rng)}, rng), kTol);
  }
}

TEST(Gradients, UnusedParameterGetsZero) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape4{1, 1, 2, 4}, 1.0));
  auto unused = tape.leaf(Tensor<double>(Shape4{1, 1, 1, 1}, 3.0));
  tape.backward(ops::mse(tape, x, Tensor<double>(Shape4{1, 1, 2, 4}, 0.0)));
  EXPECT_EQ(unused.grad()[0], 0.0);
  EXPECT_NE(x.grad()[0], 0.0);
}

TEST(Gradients, FanOutSumsBothPaths) {
  std::mt19937_64 rng(105);
  auto x1 = random_tensor({1, 2, 3, 4}, rng);
  auto x2 = random_tensor({1, 2, 3, 4}, rng);
  auto k = random_tensor({2, 2, 3, 3}, rng);
  const auto w = random_tensor({1, 2, 3, 4}, rng);
  const auto loss_of = [&](Tape<double>& t, const Var<double>& kv) {
    auto a = ops::conv2d(t, t.constant_ref(x1), kv, Var<double>{});
    auto b = ops::conv2d(t, t.constant_ref(x2), kv, Var<double>{});
    return ops::weighted_sum(t, ops::add(t, a, b), w);
  };
  Tape<double> tape;
  auto kv = tape.leaf_ref(k);
  tape.backward(loss_of(tape, kv));
  const auto path = [&](const Tensor<double>& x) {
    return [&] {
      Tape<double> t(false);
      return ops::weighted_sum(t, ops::conv2d(t, t.constant_ref(x), t.constant_ref(k), Var<double>{}), w).value()[0];
    };
  };
  const auto fd1 = oracle::finite_difference(path(x1), k);
  const auto fd2 = oracle::finite_difference(path(x2), k);
  Tensor<double> sum(k.shape());
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = fd1[i] + fd2[i];
  EXPECT_LT(oracle::norm_rel_error(kv.grad(), sum), kTol);
}

TEST(Gradients, BackwardRejectsNonScalar) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape4{1, 1, 1, 2}, 1.0));
  EXPECT_THROW(tape.backward(ops::silu(tape, x)), Error);
}

TEST(Tape, NoRecordingKeepsNothing) {
  Tape<double> tape(false);
  auto x = tape.leaf(Tensor<double>(Shape4{1, 1, 1, 2}, 1.0));
  auto y = ops::silu(tape, x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

}  // namespace
}  // namespace fmcast

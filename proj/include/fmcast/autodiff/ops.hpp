// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <vector>

#include "fmcast/autodiff/kernels.hpp"
#include "fmcast/autodiff/tape.hpp"

namespace fmcast::ops {

template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride = 1,
           const kernels::PackedWeights<T>* packed = nullptr) {
  const bool has_bias = bias.valid();
  auto y = kernels::conv2d_forward(x.value(), kernel.value(), has_bias ? &bias.value() : nullptr, stride, packed);
  std::vector<Var<T>> in{x, kernel};
  if (has_bias) in.push_back(bias);
  return tape.record(std::move(y), std::move(in), [stride](Node<T>& n) {
    kernels::conv2d_backward(n.input_val(0), n.input_val(1), stride, n.grad, n.input_grad(0), n.input_grad(1),
                             n.inputs.size() > 2 ? n.input_grad(2) : nullptr);
  });
}

/// gamma/beta are optional (1 or N, C, 1, 1) handles.
template <class T>
Var<T> group_norm(Tape<T>& tape, const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  auto stats = std::make_shared<kernels::GroupNormStats>();
  auto y = kernels::group_norm_forward(x.value(), groups, gamma.valid() ? &gamma.value() : nullptr,
                                       beta.valid() ? &beta.value() : nullptr, eps, stats.get());
  std::vector<Var<T>> in{x};
  const int gi = gamma.valid() ? static_cast<int>(in.size()) : -1;
  if (gamma.valid()) in.push_back(gamma);
  const int bi = beta.valid() ? static_cast<int>(in.size()) : -1;
  if (beta.valid()) in.push_back(beta);
  return tape.record(std::move(y), std::move(in), [stats, gi, bi](Node<T>& n) {
    const Tensor<T>* g = gi >= 0 ? &n.input_val(static_cast<std::size_t>(gi)) : nullptr;
    kernels::group_norm_backward(n.input_val(0), *stats, g, n.grad, n.input_grad(0),
                                 gi >= 0 ? n.input_grad(static_cast<std::size_t>(gi)) : nullptr,
                                 bi >= 0 ? n.input_grad(static_cast<std::size_t>(bi)) : nullptr);
  });
}

template <class T>
Var<T> silu(Tape<T>& tape, const Var<T>& x) {
  return tape.record(kernels::silu_forward(x.value()), {x}, [](Node<T>& n) {
    if (auto* dx = n.input_grad(0)) kernels::silu_backward(n.input_val(0), n.grad, *dx);
  });
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  auto y = Tensor<T>::uninitialized(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return tape.record(std::move(y), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* d = n.input_grad(k))
        for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += n.grad[i];
  });
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T s) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v *= s;
  return tape.record(std::move(y), {x}, [s](Node<T>& n) {
    if (auto* d = n.input_grad(0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += s * n.grad[i];
  });
}

/// Channel concatenation; all parts share batch and spatial extents.
template <class T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::Shape, "concat of zero tensors");
  const auto& s0 = parts.front().shape();
  std::size_t c_total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      fail(ErrorKind::Shape, "concat needs equal batch/spatial dims: ", s0, " vs ", s);
    c_total += s.c;
  }
  auto y = Tensor<T>::uninitialized(Shape4{s0.n, c_total, s0.h, s0.w});
  std::vector<std::size_t> offsets;
  for (std::size_t n = 0; n < s0.n; ++n) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const auto src = p.value().sample(n);
      std::copy(src.begin(), src.end(), y.data() + y.index(n, off, 0, 0));
      off += p.shape().c;
    }
  }
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += p.shape().c;
  }
  return tape.record(std::move(y), parts, [offsets](Node<T>& n) {
    const auto& sy = n.grad.shape();
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      auto* d = n.input_grad(k);
      if (!d) continue;
      const std::size_t len = d->shape().c * sy.plane();
      for (std::size_t b = 0; b < sy.n; ++b) {
        const T* src = n.grad.data() + n.grad.index(b, offsets[k], 0, 0);
        T* dst = d->data() + b * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::size_t start, std::size_t count) {
  const auto& s = x.shape();
  if (start + count > s.c) fail(ErrorKind::Shape, "channel slice [", start, ",", start + count, ") of ", s);
  Tensor<T> y(Shape4{s.n, count, s.h, s.w});
  const std::size_t len = count * s.plane();
  for (std::size_t b = 0; b < s.n; ++b)
    std::copy_n(x.value().data() + x.value().index(b, start, 0, 0), len, y.data() + b * len);
  return tape.record(std::move(y), {x}, [start, len](Node<T>& n) {
    auto* d = n.input_grad(0);
    if (!d) return;
    for (std::size_t b = 0; b < n.grad.shape().n; ++b) {
      T* dst = d->data() + d->index(b, start, 0, 0);
      const T* src = n.grad.data() + b * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var<T> upsample_nearest(Tape<T>& tape, const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  return tape.record(kernels::upsample_nearest_forward(x.value(), out_h, out_w), {x}, [](Node<T>& n) {
    if (auto* d = n.input_grad(0)) kernels::upsample_nearest_backward(n.grad, *d);
  });
}

template <class T>
Var<T> upsample_nearest2x(Tape<T>& tape, const Var<T>& x) {
  return upsample_nearest(tape, x, 2 * x.shape().h, 2 * x.shape().w);
}

template <class T>
Var<T> dense(Tape<T>& tape, const Var<T>& x, const Var<T>& weights, const Var<T>& bias) {
  const bool has_bias = bias.valid();
  auto y = kernels::dense_forward(x.value(), weights.value(), has_bias ? &bias.value() : nullptr);
  std::vector<Var<T>> in{x, weights};
  if (has_bias) in.push_back(bias);
  return tape.record(std::move(y), std::move(in), [](Node<T>& n) {
    kernels::dense_backward(n.input_val(0), n.input_val(1), n.grad, n.input_grad(0), n.input_grad(1),
                            n.inputs.size() > 2 ? n.input_grad(2) : nullptr);
  });
}

template <class T>
Var<T> attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  auto weights = std::make_shared<AlignedVector<T>>();
  auto y = kernels::attention_forward(q.value(), k.value(), v.value(), weights.get());
  return tape.record(std::move(y), {q, k, v}, [weights](Node<T>& n) {
    kernels::attention_backward(n.input_val(0), n.input_val(1), n.input_val(2), *weights, n.grad, n.input_grad(0),
                                n.input_grad(1), n.input_grad(2));
  });
}

/// Mean squared difference against a constant target, as a scalar.
template <class T>
Var<T> mse(Tape<T>& tape, const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.value(), target, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred.value()[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  const double count = static_cast<double>(target.size());
  Tensor<T> y(Shape4{1, 1, 1, 1}, static_cast<T>(acc / count));
  auto tgt = std::make_shared<Tensor<T>>(target);
  return tape.record(std::move(y), {pred}, [tgt, count](Node<T>& n) {
    auto* d = n.input_grad(0);
    if (!d) return;
    const T g = n.grad[0] * static_cast<T>(2.0 / count);
    const auto& p = n.input_val(0);
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g * (p[i] - (*tgt)[i]);
  });
}

/// Sum of x * w for a constant weight tensor; handy for scalarizing outputs.
template <class T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& x, const Tensor<T>& w) {
  require_same_shape(x.value(), w, "weighted_sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(x.value()[i]) * static_cast<double>(w[i]);
  auto wt = std::make_shared<Tensor<T>>(w);
  return tape.record(Tensor<T>(Shape4{1, 1, 1, 1}, static_cast<T>(acc)), {x}, [wt](Node<T>& n) {
    if (auto* d = n.input_grad(0))
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += n.grad[0] * (*wt)[i];
  });
}

/// Projection weights for single-head spatial self-attention; each projection
/// is a 1x1 convolution (C, C, 1, 1) with bias.
template <class T>
struct AttentionWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Attention output before the residual: Wo * softmax(QᵀK / sqrt(C)) V.
template <class T>
Var<T> attention_branch(Tape<T>& tape, const Var<T>& x, const AttentionWeights<T>& w) {
  const auto q = conv2d(tape, x, w.wq, w.bq);
  const auto k = conv2d(tape, x, w.wk, w.bk);
  const auto v = conv2d(tape, x, w.wv, w.bv);
  return conv2d(tape, attention(tape, q, k, v), w.wo, w.bo);
}

template <class T>
Var<T> self_attention(Tape<T>& tape, const Var<T>& x, const AttentionWeights<T>& w) {
  return add(tape, x, attention_branch(tape, x, w));
}

}  // namespace fmcast::ops

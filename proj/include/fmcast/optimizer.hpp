// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "fmcast/net.hpp"

namespace fmcast {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  bool empty() const noexcept { return m.empty(); }
};

/// Adaptive-moment update with decoupled decay on flagged tensors:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   w <- w - lr (m_hat / (sqrt(v_hat) + eps) + lambda w)
template <class T>
void adam_update(std::vector<Tensor<T>*> weights, const std::vector<bool>& decay, const std::vector<Tensor<T>>& grads,
                 AdamState<T>& st, double lr, const AdamConfig& cfg) {
  if (weights.size() != grads.size() || decay.size() != grads.size())
    fail(ErrorKind::Shape, "optimizer got ", weights.size(), " tensors, ", grads.size(), " gradients");
  if (!(lr > 0.0)) fail(ErrorKind::Domain, "learning rate must be positive, got ", lr);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(*weights[i], grads[i], "optimizer gradient");
    if (!grads[i].all_finite()) fail(ErrorKind::NonFinite, "non-finite gradient in tensor ", i);
  }
  if (st.empty()) {
    for (const auto* w : weights) {
      st.m.emplace_back(w->shape());
      st.v.emplace_back(w->shape());
    }
  }
  st.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& w = *weights[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    const double lambda = decay[i] ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = static_cast<double>(grads[i][k]);
      const double mk = cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * g;
      const double vk = cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double wk = static_cast<double>(w[k]);
      const double next = wk - lr * ((mk / c1) / (std::sqrt(vk / c2) + cfg.eps) + lambda * wk);
      if (!std::isfinite(next)) fail(ErrorKind::NonFinite, "non-finite update in tensor ", i, " element ", k);
      w[k] = static_cast<T>(next);
    }
  }
}

template <class T>
void optimizer_step(ModelParameters<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& st, double lr,
                    const AdamConfig& cfg) {
  std::vector<Tensor<T>*> w;
  std::vector<bool> decay;
  for (auto& e : params.entries()) {
    w.push_back(&e.value);
    decay.push_back(e.spec.decay);
  }
  adam_update(std::move(w), decay, grads, st, lr, cfg);
}

}  // namespace fmcast

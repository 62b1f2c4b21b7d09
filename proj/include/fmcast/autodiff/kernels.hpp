// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

// Forward/backward kernels on NCHW tensors. These are pure functions; the tape
// in ops.hpp wires them into a differentiable graph.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "fmcast/tensor.hpp"

namespace fmcast::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Zonally periodic convolution

struct ConvGeometry {
  std::size_t cin = 0, cout = 0, kh = 1, kw = 1, stride = 1;
  std::size_t h = 0, w = 0, ho = 0, wo = 0;

  std::size_t k() const noexcept { return cin * kh * kw; }
  std::size_t p_in() const noexcept { return h * w; }
  std::size_t p_out() const noexcept { return ho * wo; }
  bool pointwise() const noexcept { return kh == 1 && kw == 1 && stride == 1; }
};

template <class T>
ConvGeometry conv_geometry(const Shape4& x, const Shape4& kernel, std::size_t stride) {
  if (stride != 1 && stride != 2) fail(ErrorKind::Domain, "conv stride must be 1 or 2, got ", stride);
  if (kernel.h % 2 == 0 || kernel.w % 2 == 0) fail(ErrorKind::Shape, "conv kernel extents must be odd, got ", kernel);
  if (kernel.c != x.c)
    fail(ErrorKind::Shape, "conv input has ", x.c, " channels but kernel expects ", kernel.c, " (kernel ", kernel, ")");
  ConvGeometry g;
  g.cin = x.c;
  g.cout = kernel.n;
  g.kh = kernel.h;
  g.kw = kernel.w;
  g.stride = stride;
  g.h = x.h;
  g.w = x.w;
  g.ho = (x.h + stride - 1) / stride;
  g.wo = (x.w + stride - 1) / stride;
  return g;
}

/// Longitude source column for every (kernel column, output column) pair.
inline std::vector<std::size_t> lon_table(const ConvGeometry& g) {
  std::vector<std::size_t> lon(g.kw * g.wo);
  const long pw = static_cast<long>(g.kw / 2);
  const long w = static_cast<long>(g.w);
  for (std::size_t kj = 0; kj < g.kw; ++kj)
    for (std::size_t oj = 0; oj < g.wo; ++oj) {
      long j = (static_cast<long>(oj * g.stride + kj) - pw) % w;
      if (j < 0) j += w;
      lon[kj * g.wo + oj] = static_cast<std::size_t>(j);
    }
  return lon;
}

/// Unfolds one sample (cin x h x w) into a (cin*kh*kw) x (ho*wo) row-major
/// matrix: circular along longitude, zero rows outside the latitude range.
template <class T>
void im2col_periodic(const T* x, const ConvGeometry& g, T* col, std::size_t ld = 0) {
  if (ld == 0) ld = g.p_out();
  const long ph = static_cast<long>(g.kh / 2);
  const auto lon = lon_table(g);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xp = x + ci * g.p_in();
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t* lj = lon.data() + kj * g.wo;
        // stride 1: each output row is the input row rotated by lj[0]
        const std::size_t rot = lj[0];
        T* row = col + ((ci * g.kh + ki) * g.kw + kj) * ld;
        std::fill(row + g.p_out(), row + ld, T(0));
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long i = static_cast<long>(oi * g.stride + ki) - ph;
          T* dst = row + oi * g.wo;
          if (i < 0 || i >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = xp + static_cast<std::size_t>(i) * g.w;
          if (g.stride == 1) {
            std::copy(src + rot, src + g.w, dst);
            std::copy(src, src + rot, dst + (g.w - rot));
          } else {
            for (std::size_t oj = 0; oj < g.wo; ++oj) dst[oj] = src[lj[oj]];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col_periodic: scatters a column matrix back into dx (accumulating).
template <class T>
void col2im_periodic(const T* col, const ConvGeometry& g, T* dx) {
  const long ph = static_cast<long>(g.kh / 2);
  const auto lon = lon_table(g);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xp = dx + ci * g.p_in();
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const std::size_t* lj = lon.data() + kj * g.wo;
        const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * g.p_out();
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long i = static_cast<long>(oi * g.stride + ki) - ph;
          if (i < 0 || i >= static_cast<long>(g.h)) continue;
          const T* src = row + oi * g.wo;
          T* dst = xp + static_cast<std::size_t>(i) * g.w;
          for (std::size_t oj = 0; oj < g.wo; ++oj) dst[lj[oj]] += src[oj];
        }
      }
    }
  }
}

/// Per-thread scratch reused across calls; slot distinguishes buffers that
/// are live at the same time.
template <class T, int Slot>
AlignedVector<T>& scratch(std::size_t n) {
  thread_local AlignedVector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

/// Copies n values into an aligned scratch buffer. Eigen products only ever see
/// operands that start on a packet boundary, so a sample's result does not
/// depend on its position in the batch or on allocator placement.
template <class T>
const T* stage(const T* src, std::size_t n, AlignedVector<T>& buf) {
  buf.assign(src, src + n);
  return buf.data();
}

/// Weights (rows x depth, row-major) rearranged for packed_gemm: blocks of
/// `lanes` consecutive rows, each stored depth-major, zero-padded past `rows`.
template <class T>
struct PackedWeights {
  static constexpr std::size_t lanes = Eigen::internal::unpacket_traits<typename Eigen::internal::packet_traits<T>::type>::size;
  std::size_t rows = 0;
  std::size_t depth = 0;
  AlignedVector<T> data;

  std::size_t blocks() const noexcept { return (rows + lanes - 1) / lanes; }
};

template <class T>
PackedWeights<T> pack_weights(const T* w, std::size_t rows, std::size_t depth) {
  PackedWeights<T> p;
  constexpr std::size_t L = PackedWeights<T>::lanes;
  p.rows = rows;
  p.depth = depth;
  p.data.assign(p.blocks() * depth * L, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < depth; ++k) p.data[((r / L) * depth + k) * L + r % L] = w[r * depth + k];
  return p;
}

template <class T>
PackedWeights<T> pack_kernel(const Tensor<T>& kernel) {
  return pack_weights(kernel.data(), kernel.shape().n, kernel.shape().c * kernel.shape().h * kernel.shape().w);
}

inline constexpr std::size_t kTileCols = 6;

inline std::size_t padded_cols(std::size_t p) { return (p + kTileCols - 1) / kTileCols * kTileCols; }

namespace detail {

/// One tile: `NB` row blocks by kTileCols columns. Every output element is a
/// single fused multiply-add chain over k in increasing order, so the result
/// depends only on the operand values, never on the tile position.
template <class T, int NB>
void packed_tile(const T* wp, std::size_t depth, const T* x, std::size_t ldx, T* tile) {
  using namespace Eigen::internal;
  using Pk = typename packet_traits<T>::type;
  constexpr std::size_t L = PackedWeights<T>::lanes;
  Pk acc[NB][kTileCols];
  for (int b = 0; b < NB; ++b)
    for (std::size_t j = 0; j < kTileCols; ++j) acc[b][j] = pset1<Pk>(T(0));
  for (std::size_t k = 0; k < depth; ++k, x += ldx) {
    Pk w[NB];
    for (int b = 0; b < NB; ++b) w[b] = ploadu<Pk>(wp + (static_cast<std::size_t>(b) * depth + k) * L);
    for (std::size_t j = 0; j < kTileCols; ++j) {
      const Pk s = pset1<Pk>(x[j]);
      for (int b = 0; b < NB; ++b) acc[b][j] = pmadd(s, w[b], acc[b][j]);
    }
  }
  for (int b = 0; b < NB; ++b)
    for (std::size_t j = 0; j < kTileCols; ++j) pstoreu(tile + (static_cast<std::size_t>(b) * kTileCols + j) * L, acc[b][j]);
}

}  // namespace detail

/// y (rows x cols, row-major, leading dimension cols) = W x, where x is
/// depth x ldx row-major with ldx = padded_cols(cols) and zeroed padding.
template <class T>
void packed_gemm(const PackedWeights<T>& w, const T* x, std::size_t cols, T* y) {
  constexpr std::size_t L = PackedWeights<T>::lanes;
  const std::size_t ldx = padded_cols(cols);
  alignas(64) T tile[2 * kTileCols * L];
  const std::size_t nb = w.blocks();
  for (std::size_t b0 = 0; b0 < nb; b0 += 2) {
    const int count = b0 + 1 < nb ? 2 : 1;
    const T* wp = w.data.data() + b0 * w.depth * L;
    for (std::size_t p0 = 0; p0 < cols; p0 += kTileCols) {
      if (count == 2)
        detail::packed_tile<T, 2>(wp, w.depth, x + p0, ldx, tile);
      else
        detail::packed_tile<T, 1>(wp, w.depth, x + p0, ldx, tile);
      const std::size_t pc = std::min(kTileCols, cols - p0);
      for (int b = 0; b < count; ++b)
        for (std::size_t i = 0; i < L; ++i) {
          const std::size_t r = (b0 + static_cast<std::size_t>(b)) * L + i;
          if (r >= w.rows) break;
          for (std::size_t j = 0; j < pc; ++j) y[r * cols + p0 + j] = tile[(static_cast<std::size_t>(b) * kTileCols + j) * L + i];
        }
    }
  }
}

/// Cross-correlation. kernel: (cout, cin, kh, kw); bias: cout values or empty.
/// Output lon extent is ceil(w / stride); latitude likewise. `packed` may hold
/// pack_kernel(kernel) to skip repacking on every call.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>* bias, std::size_t stride,
                         const PackedWeights<T>* packed = nullptr) {
  const auto g = conv_geometry<T>(x.shape(), kernel.shape(), stride);
  if (bias && bias->size() != g.cout) fail(ErrorKind::Shape, "conv bias has ", bias->size(), " values, expected ", g.cout);
  if (packed && (packed->rows != g.cout || packed->depth != g.k()))
    fail(ErrorKind::Shape, "packed weights are ", packed->rows, "x", packed->depth, ", kernel needs ", g.cout, "x", g.k());
  auto y = Tensor<T>::uninitialized(Shape4{x.shape().n, g.cout, g.ho, g.wo});
  PackedWeights<T> local;
  if (!packed) {
    local = pack_kernel(kernel);
    packed = &local;
  }
  const std::size_t ld = padded_cols(g.p_out());
  auto& col = scratch<T, 0>(g.k() * ld);
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* xs = x.data() + n * g.cin * g.p_in();
    if (g.pointwise()) {
      for (std::size_t c = 0; c < g.cin; ++c) {
        std::copy(xs + c * g.p_in(), xs + (c + 1) * g.p_in(), col.data() + c * ld);
        std::fill(col.data() + c * ld + g.p_in(), col.data() + (c + 1) * ld, T(0));
      }
    } else {
      im2col_periodic(xs, g, col.data(), ld);
    }
    T* ys = y.data() + n * g.cout * g.p_out();
    packed_gemm(*packed, col.data(), g.p_out(), ys);
    if (bias)
      for (std::size_t c = 0; c < g.cout; ++c)
        for (std::size_t i = 0; i < g.p_out(); ++i) ys[c * g.p_out() + i] += (*bias)[c];
  }
  return y;
}

/// Gradients of conv2d_forward. Any of dx/dk/db may be null; non-null outputs
/// are accumulated into (they must already have the right shape).
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dk, Tensor<T>* db) {
  const auto g = conv_geometry<T>(x.shape(), kernel.shape(), stride);
  CMapMat<T> wmat(kernel.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.k()));
  auto& col = scratch<T, 0>(g.pointwise() ? 0 : g.k() * g.p_out());
  auto& dxbuf = scratch<T, 1>(g.k() * g.p_out());
  AlignedVector<T>& xin = scratch<T, 2>(0);
  AlignedVector<T>& gbuf = scratch<T, 3>(0);
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* gs = stage(dy.data() + n * g.cout * g.p_out(), g.cout * g.p_out(), gbuf);
    CMapMat<T> gmat(gs, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.p_out()));
    if (db)
      for (std::size_t co = 0; co < g.cout; ++co) {
        T acc = 0;
        for (std::size_t i = 0; i < g.p_out(); ++i) acc += gs[co * g.p_out() + i];
        (*db)[co] += acc;
      }
    const T* xs = x.data() + n * g.cin * g.p_in();
    if (dk) {
      const T* cp = nullptr;
      if (g.pointwise()) {
        cp = stage(xs, g.cin * g.p_in(), xin);
      } else {
        im2col_periodic(xs, g, col.data());
        cp = col.data();
      }
      CMapMat<T> cmat(cp, static_cast<Eigen::Index>(g.k()), static_cast<Eigen::Index>(g.p_out()));
      MapMat<T> dkmat(dk->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.k()));
      dkmat.noalias() += gmat * cmat.transpose();
    }
    if (dx) {
      MapMat<T>(dxbuf.data(), static_cast<Eigen::Index>(g.k()), static_cast<Eigen::Index>(g.p_out())).noalias() =
          wmat.transpose() * gmat;
      T* dxs = dx->data() + n * g.cin * g.p_in();
      if (g.pointwise()) {
        for (std::size_t i = 0; i < g.cin * g.p_in(); ++i) dxs[i] += dxbuf[i];
      } else {
        col2im_periodic(dxbuf.data(), g, dxs);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Group normalization with externally supplied affine

struct GroupNormStats {
  std::size_t groups = 1;
  std::vector<double> mean;  // per (n, group)
  std::vector<double> rstd;
};

/// gamma/beta: (1 or N, C, 1, 1); null means identity (gamma 1, beta 0).
template <class T>
Tensor<T> group_norm_forward(const Tensor<T>& x, std::size_t groups, const Tensor<T>* gamma, const Tensor<T>* beta,
                             double eps, GroupNormStats* stats_out = nullptr) {
  const auto& s = x.shape();
  if (groups == 0 || s.c % groups != 0)
    fail(ErrorKind::Shape, "group norm: ", s.c, " channels not divisible into ", groups, " groups");
  if (!(eps > 0.0)) fail(ErrorKind::Domain, "group norm eps must be positive");
  const auto check_affine = [&](const Tensor<T>* a, const char* name) {
    if (!a) return;
    if (a->shape().c != s.c || (a->shape().n != 1 && a->shape().n != s.n) || a->shape().plane() != 1)
      fail(ErrorKind::Shape, "group norm ", name, " shape ", a->shape(), " incompatible with input ", s);
  };
  check_affine(gamma, "gamma");
  check_affine(beta, "beta");
  const std::size_t cpg = s.c / groups;
  const std::size_t count = cpg * s.plane();
  GroupNormStats st;
  st.groups = groups;
  st.mean.resize(s.n * groups);
  st.rstd.resize(s.n * groups);
  auto y = Tensor<T>::uninitialized(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* xp = x.data() + x.index(n, g * cpg, 0, 0);
      double sum = 0.0;
      for (std::size_t i = 0; i < count; ++i) sum += static_cast<double>(xp[i]);
      const double mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(xp[i]) - mean;
        sq += d * d;
      }
      const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(count) + eps);
      st.mean[n * groups + g] = mean;
      st.rstd[n * groups + g] = rstd;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t c = g * cpg + cc;
        const double ga = gamma ? static_cast<double>((*gamma)[(gamma->shape().n == 1 ? 0 : n) * s.c + c]) : 1.0;
        const double be = beta ? static_cast<double>((*beta)[(beta->shape().n == 1 ? 0 : n) * s.c + c]) : 0.0;
        const T* xc = x.data() + x.index(n, c, 0, 0);
        T* yc = y.data() + y.index(n, c, 0, 0);
        for (std::size_t p = 0; p < s.plane(); ++p)
          yc[p] = static_cast<T>((static_cast<double>(xc[p]) - mean) * rstd * ga + be);
      }
    }
  }
  if (stats_out) *stats_out = std::move(st);
  return y;
}

template <class T>
void group_norm_backward(const Tensor<T>& x, const GroupNormStats& st, const Tensor<T>* gamma, const Tensor<T>& dy,
                         Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const auto& s = x.shape();
  const std::size_t groups = st.groups;
  const std::size_t cpg = s.c / groups;
  const double count = static_cast<double>(cpg * s.plane());
  std::vector<double> dxhat(cpg * s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double mean = st.mean[n * groups + g];
      const double rstd = st.rstd[n * groups + g];
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t c = g * cpg + cc;
        const double ga = gamma ? static_cast<double>((*gamma)[(gamma->shape().n == 1 ? 0 : n) * s.c + c]) : 1.0;
        const T* xc = x.data() + x.index(n, c, 0, 0);
        const T* gc = dy.data() + dy.index(n, c, 0, 0);
        double dg = 0.0, dbsum = 0.0;
        for (std::size_t p = 0; p < s.plane(); ++p) {
          const double xhat = (static_cast<double>(xc[p]) - mean) * rstd;
          const double gy = static_cast<double>(gc[p]);
          dg += gy * xhat;
          dbsum += gy;
          const double dxh = gy * ga;
          dxhat[cc * s.plane() + p] = dxh;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat;
        }
        if (dgamma) (*dgamma)[(dgamma->shape().n == 1 ? 0 : n) * s.c + c] += static_cast<T>(dg);
        if (dbeta) (*dbeta)[(dbeta->shape().n == 1 ? 0 : n) * s.c + c] += static_cast<T>(dbsum);
      }
      if (!dx) continue;
      const double m1 = sum_dxhat / count;
      const double m2 = sum_dxhat_xhat / count;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t c = g * cpg + cc;
        const T* xc = x.data() + x.index(n, c, 0, 0);
        T* dxc = dx->data() + dx->index(n, c, 0, 0);
        for (std::size_t p = 0; p < s.plane(); ++p) {
          const double xhat = (static_cast<double>(xc[p]) - mean) * rstd;
          dxc[p] += static_cast<T>(rstd * (dxhat[cc * s.plane() + p] - m1 - xhat * m2));
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pointwise

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Tensor<T> silu_forward(const Tensor<T>& x) {
  auto y = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <class T>
void silu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    dx[i] += dy[i] * (s + x[i] * s * (T(1) - s));
  }
}

// ---------------------------------------------------------------------------
// Dense layer on (N, Cin, 1, 1) rows

/// weights: (Cout, Cin, 1, 1); bias: Cout values or null. Rows are processed
/// one at a time so each result is independent of the batch size.
template <class T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>* bias) {
  const std::size_t cin = x.shape().c * x.shape().plane();
  const std::size_t cout = weights.shape().n;
  if (weights.size() != cout * cin)
    fail(ErrorKind::Shape, "dense input width ", cin, " does not match weights ", weights.shape());
  if (bias && bias->size() != cout) fail(ErrorKind::Shape, "dense bias has ", bias->size(), " values, expected ", cout);
  Tensor<T> y(Shape4{x.shape().n, cout, 1, 1});
  CMapMat<T> wm(weights.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
  AlignedVector<T> xin, yout(cout);
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* xs = stage(x.data() + n * cin, cin, xin);
    MapMat<T>(yout.data(), static_cast<Eigen::Index>(cout), 1).noalias() =
        wm * CMapMat<T>(xs, static_cast<Eigen::Index>(cin), 1);
    for (std::size_t o = 0; o < cout; ++o) y[n * cout + o] = yout[o] + (bias ? (*bias)[o] : T(0));
  }
  return y;
}

template <class T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dw,
                    Tensor<T>* db) {
  const std::size_t cin = x.shape().c * x.shape().plane();
  const std::size_t cout = weights.shape().n;
  const auto ci = static_cast<Eigen::Index>(cin);
  const auto co = static_cast<Eigen::Index>(cout);
  CMapMat<T> wm(weights.data(), co, ci);
  AlignedVector<T> xin, gin, dxbuf(cin);
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* gs = stage(dy.data() + n * cout, cout, gin);
    if (dx) {
      MapMat<T>(dxbuf.data(), ci, 1).noalias() = wm.transpose() * CMapMat<T>(gs, co, 1);
      for (std::size_t i = 0; i < cin; ++i) (*dx)[n * cin + i] += dxbuf[i];
    }
    if (dw) {
      const T* xs = stage(x.data() + n * cin, cin, xin);
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < cin; ++i) (*dw)[o * cin + i] += gs[o] * xs[i];
    }
    if (db)
      for (std::size_t o = 0; o < cout; ++o) (*db)[o] += gs[o];
  }
}

// ---------------------------------------------------------------------------
// Resampling

/// Nearest-neighbour upsampling: output (i, j) reads input (i/2, j/2). The
/// target extent may be one less than twice the input to undo a ceil'd stride.
template <class T>
Tensor<T> upsample_nearest_forward(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto& s = x.shape();
  if (out_h > 2 * s.h || out_h + 1 < 2 * s.h || out_w > 2 * s.w || out_w + 1 < 2 * s.w)
    fail(ErrorKind::Shape, "nearest upsample from ", s.h, "x", s.w, " to ", out_h, "x", out_w, " is not a 2x resize");
  Tensor<T> y(Shape4{s.n, s.c, out_h, out_w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) y(n, c, i, j) = x(n, c, i / 2, j / 2);
  return y;
}

template <class T>
void upsample_nearest_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const auto& s = dy.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) dx(n, c, i / 2, j / 2) += dy(n, c, i, j);
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention over spatial positions

/// q, k, v: (N, C, H, W); tokens are the H*W positions with C features.
/// Returns out and stores the softmax weights (N x P x P) for the backward.
template <class T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            AlignedVector<T>* weights_out) {
  require_same_shape(q, k, "attention q/k");
  require_same_shape(q, v, "attention q/v");
  const auto& s = q.shape();
  const std::size_t len = s.c * s.plane();
  const std::size_t np = s.plane();
  const auto c = static_cast<Eigen::Index>(s.c);
  const auto p = static_cast<Eigen::Index>(np);
  const T scale = T(1) / std::sqrt(static_cast<T>(s.c));
  Tensor<T> out(s);
  AlignedVector<T> weights(s.n * np * np);
  AlignedVector<T> qb, kb, vb, a(np * np), ob(len);
  for (std::size_t n = 0; n < s.n; ++n) {
    CMapMat<T> qm(stage(q.data() + n * len, len, qb), c, p);
    CMapMat<T> km(stage(k.data() + n * len, len, kb), c, p);
    CMapMat<T> vm(stage(v.data() + n * len, len, vb), c, p);
    MapMat<T> am(a.data(), p, p);
    am.noalias() = qm.transpose() * km;
    for (std::size_t i = 0; i < np; ++i) {
      T* row = a.data() + i * np;
      T mx = row[0] * scale;
      for (std::size_t j = 0; j < np; ++j) mx = std::max(mx, row[j] * scale);
      T z = 0;
      for (std::size_t j = 0; j < np; ++j) {
        row[j] = std::exp(row[j] * scale - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < np; ++j) row[j] /= z;
    }
    MapMat<T>(ob.data(), c, p).noalias() = vm * am.transpose();
    std::copy(ob.begin(), ob.end(), out.data() + n * len);
    std::copy(a.begin(), a.end(), weights.data() + n * np * np);
  }
  if (weights_out) *weights_out = std::move(weights);
  return out;
}

template <class T>
void attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AlignedVector<T>& weights,
                        const Tensor<T>& dout, Tensor<T>* dq, Tensor<T>* dk, Tensor<T>* dv) {
  const auto& s = q.shape();
  const std::size_t len = s.c * s.plane();
  const std::size_t np = s.plane();
  const auto c = static_cast<Eigen::Index>(s.c);
  const auto p = static_cast<Eigen::Index>(np);
  const T scale = T(1) / std::sqrt(static_cast<T>(s.c));
  AlignedVector<T> qb, kb, vb, gb, ab, da(np * np), ds(np * np), res(len);
  const auto accumulate = [&](Tensor<T>* dst, std::size_t n) {
    for (std::size_t i = 0; i < len; ++i) (*dst)[n * len + i] += res[i];
  };
  for (std::size_t n = 0; n < s.n; ++n) {
    CMapMat<T> g(stage(dout.data() + n * len, len, gb), c, p);
    CMapMat<T> a(stage(weights.data() + n * np * np, np * np, ab), p, p);
    CMapMat<T> vm(stage(v.data() + n * len, len, vb), c, p);
    MapMat<T> out(res.data(), c, p);
    if (dv) {
      out.noalias() = g * a;
      accumulate(dv, n);
    }
    MapMat<T>(da.data(), p, p).noalias() = g.transpose() * vm;
    for (std::size_t i = 0; i < np; ++i) {
      const T* dr = da.data() + i * np;
      const T* ar = ab.data() + i * np;
      T dot = 0;
      for (std::size_t j = 0; j < np; ++j) dot += dr[j] * ar[j];
      for (std::size_t j = 0; j < np; ++j) ds[i * np + j] = scale * ar[j] * (dr[j] - dot);
    }
    CMapMat<T> dsm(ds.data(), p, p);
    if (dq) {
      out.noalias() = CMapMat<T>(stage(k.data() + n * len, len, kb), c, p) * dsm.transpose();
      accumulate(dq, n);
    }
    if (dk) {
      out.noalias() = CMapMat<T>(stage(q.data() + n * len, len, qb), c, p) * dsm;
      accumulate(dk, n);
    }
  }
}

}  // namespace fmcast::kernels

// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

// Conditional U-Net velocity field v(x_t, t, cond).
//
// Signal path: in-conv, four residual levels with noise-conditioned group norm,
// stride-2 periodic downsampling between levels, self-attention at the
// bottleneck. Condition path: the same ladder over the two prior days with
// plain group norm. Each decoder level concatenates the running features with
// both encoders' same-resolution features.

#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fmcast/autodiff/ops.hpp"
#include "fmcast/text_header.hpp"

namespace fmcast {

inline constexpr std::size_t kLevels = 4;

struct NetConfig {
  std::size_t in_channels = 6;
  std::size_t base_width = 32;
  std::array<std::size_t, kLevels> mult{1, 2, 2, 4};
  std::size_t groups = 8;
  std::size_t emb_dim = 64;
  double max_frequency = 100.0;
  double eps = 1e-5;

  std::size_t cond_channels() const noexcept { return 2 * in_channels; }
  std::size_t width(std::size_t level) const noexcept { return base_width * mult[level]; }

  void validate() const {
    if (in_channels == 0) fail(ErrorKind::Config, "net needs at least one input channel");
    if (emb_dim < 2 || emb_dim % 2 != 0) fail(ErrorKind::Config, "embedding dimension must be even and >= 2, got ", emb_dim);
    if (groups == 0) fail(ErrorKind::Config, "group count must be positive");
    if (!(max_frequency >= 1.0)) fail(ErrorKind::Config, "max embedding frequency must be >= 1");
    if (!(eps > 0.0)) fail(ErrorKind::Config, "normalization eps must be positive");
    for (std::size_t l = 0; l < kLevels; ++l)
      if (width(l) == 0 || width(l) % groups != 0)
        fail(ErrorKind::Config, "level ", l, " width ", width(l), " is not a positive multiple of ", groups, " groups");
  }

  void write(TextHeader& h) const {
    h.set_num("net.in_channels", in_channels);
    h.set_num("net.base_width", base_width);
    h.set("net.mult", std::to_string(mult[0]) + "," + std::to_string(mult[1]) + "," + std::to_string(mult[2]) + "," +
                          std::to_string(mult[3]));
    h.set_num("net.groups", groups);
    h.set_num("net.emb_dim", emb_dim);
    h.set_num("net.max_frequency", max_frequency);
    h.set_num("net.eps", eps);
  }

  static NetConfig read(const TextHeader& h) {
    NetConfig c;
    c.in_channels = static_cast<std::size_t>(h.get_int("net.in_channels"));
    c.base_width = static_cast<std::size_t>(h.get_int("net.base_width"));
    const auto m = split(h.get("net.mult"), ',');
    if (m.size() != kLevels) fail(ErrorKind::Format, "net.mult needs ", kLevels, " entries");
    for (std::size_t l = 0; l < kLevels; ++l) c.mult[l] = static_cast<std::size_t>(TextHeader::parse_int(m[l], "net.mult"));
    c.groups = static_cast<std::size_t>(h.get_int("net.groups"));
    c.emb_dim = static_cast<std::size_t>(h.get_int("net.emb_dim"));
    c.max_frequency = h.get_double("net.max_frequency");
    c.eps = h.get_double("net.eps");
    c.validate();
    return c;
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameter registry

enum class InitKind { FanIn, Zero, One, AffinePredictorBias };

struct ParamSpec {
  std::string name;
  Shape4 shape;
  InitKind init = InitKind::FanIn;
  std::size_t fan_in = 1;
  bool decay = false;  // conv / dense weights only
};

/// Every learnable tensor of the network in a fixed order. The order is the
/// checkpoint block order and the initialization stream order.
inline std::vector<ParamSpec> parameter_layout(const NetConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const std::size_t e = cfg.emb_dim;
  const auto conv = [&](const std::string& p, std::size_t cin, std::size_t cout, std::size_t k) {
    out.push_back({p + ".w", {cout, cin, k, k}, InitKind::FanIn, cin * k * k, true});
    out.push_back({p + ".b", {1, cout, 1, 1}, InitKind::Zero, 1, false});
  };
  const auto dense = [&](const std::string& p, std::size_t cin, std::size_t cout) {
    out.push_back({p + ".w", {cout, cin, 1, 1}, InitKind::FanIn, cin, true});
    out.push_back({p + ".b", {1, cout, 1, 1}, InitKind::Zero, 1, false});
  };
  const auto predictor = [&](const std::string& p, std::size_t width) {
    out.push_back({p + ".w", {2 * width, e, 1, 1}, InitKind::Zero, e, true});
    out.push_back({p + ".b", {1, 2 * width, 1, 1}, InitKind::AffinePredictorBias, 1, false});
  };
  const auto plain_affine = [&](const std::string& p, std::size_t width) {
    out.push_back({p + ".gamma", {1, width, 1, 1}, InitKind::One, 1, false});
    out.push_back({p + ".beta", {1, width, 1, 1}, InitKind::Zero, 1, false});
  };
  const auto block = [&](const std::string& p, std::size_t cin, std::size_t cout, bool adaptive) {
    conv(p + ".conv1", cin, cout, 3);
    if (adaptive) predictor(p + ".norm1", cout); else plain_affine(p + ".norm1", cout);
    conv(p + ".conv2", cout, cout, 3);
    if (adaptive) predictor(p + ".norm2", cout); else plain_affine(p + ".norm2", cout);
    if (cin != cout) conv(p + ".skip", cin, cout, 1);
  };
  const auto encoder = [&](const std::string& p, std::size_t cin, bool adaptive) {
    conv(p + ".in", cin, cfg.width(0), 3);
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::size_t wi = l == 0 ? cfg.width(0) : cfg.width(l - 1);
      block(p + ".l" + std::to_string(l), wi, cfg.width(l), adaptive);
      if (l + 1 < kLevels) conv(p + ".l" + std::to_string(l) + ".down", cfg.width(l), cfg.width(l), 3);
    }
  };

  dense("emb.fc1", e, e);
  dense("emb.fc2", e, e);
  encoder("sig", cfg.in_channels, true);
  const std::size_t wb = cfg.width(kLevels - 1);
  for (const char* proj : {"q", "k", "v", "o"}) conv(std::string("attn.") + proj, wb, wb, 1);
  encoder("cond", cfg.cond_channels(), false);
  for (std::size_t l = kLevels; l-- > 0;) {
    const std::string p = "dec.l" + std::to_string(l);
    block(p, 3 * cfg.width(l), cfg.width(l), true);
    if (l > 0) conv(p + ".up", cfg.width(l), cfg.width(l - 1), 3);
  }
  conv("out", cfg.width(0), cfg.in_channels, 3);
  return out;
}

/// Named weights of the velocity network, in parameter_layout order.
template <class T>
class ModelParameters {
 public:
  struct Entry {
    ParamSpec spec;
    Tensor<T> value;
  };

  ModelParameters() = default;
  explicit ModelParameters(NetConfig cfg) : config_(cfg) {
    for (auto& s : parameter_layout(cfg)) {
      index_[s.name] = entries_.size();
      Tensor<T> v(s.shape);
      entries_.push_back({std::move(s), std::move(v)});
    }
  }

  const NetConfig& config() const noexcept { return config_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Shape, "no parameter named '", name, "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) { return entries_[index_of(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return entries_[index_of(name)].value; }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }
  bool all_finite() const noexcept {
    for (const auto& e : entries_)
      if (!e.value.all_finite()) return false;
    return true;
  }

  template <class U>
  ModelParameters<U> cast() const {
    ModelParameters<U> out(config_);
    for (std::size_t i = 0; i < entries_.size(); ++i) out.entries()[i].value = entries_[i].value.template cast<U>();
    return out;
  }

  friend bool operator==(const ModelParameters& a, const ModelParameters& b) {
    if (!(a.config_ == b.config_) || a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (!(a.entries_[i].value == b.entries_[i].value)) return false;
    return true;
  }

 private:
  NetConfig config_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases; affine
/// predictors start at zero weight with bias (gamma=1, beta=0), so every
/// adaptive norm begins as plain group normalization.
template <class T>
ModelParameters<T> init_parameters(const NetConfig& cfg, std::uint64_t seed) {
  ModelParameters<T> p(cfg);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& e = p.entries()[i];
    auto& v = e.value;
    switch (e.spec.init) {
      case InitKind::Zero: v.fill(T(0)); break;
      case InitKind::One: v.fill(T(1)); break;
      case InitKind::AffinePredictorBias:
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = k < v.size() / 2 ? T(1) : T(0);
        break;
      case InitKind::FanIn: {
        std::mt19937_64 rng(derive_seed(seed, i, 0x696e6974));
        const double bound = 1.0 / std::sqrt(static_cast<double>(e.spec.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& x : v.vec()) x = static_cast<T>(u(rng));
        break;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Noise embedding

/// Geometric frequencies 1 .. max_frequency, emb_dim / 2 of them.
inline std::vector<double> embedding_frequencies(const NetConfig& cfg) {
  const std::size_t half = cfg.emb_dim / 2;
  std::vector<double> f(half, 1.0);
  for (std::size_t k = 0; k < half && half > 1; ++k)
    f[k] = std::pow(cfg.max_frequency, static_cast<double>(k) / static_cast<double>(half - 1));
  return f;
}

inline void check_noise_level(double t) {
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::Domain, "noise level t must lie in [0,1], got ", t);
}

/// (sin(w_k t))_k followed by (cos(w_k t))_k.
template <class T>
std::vector<T> sinusoidal_features(double t, const NetConfig& cfg) {
  check_noise_level(t);
  const auto f = embedding_frequencies(cfg);
  std::vector<T> out(cfg.emb_dim);
  for (std::size_t k = 0; k < f.size(); ++k) {
    out[k] = static_cast<T>(std::sin(f[k] * t));
    out[f.size() + k] = static_cast<T>(std::cos(f[k] * t));
  }
  return out;
}

/// Conv kernels prearranged for the forward GEMM. Valid only while the
/// parameters it was built from stay unchanged. Decoder kernels that read the
/// condition skip are also split by input channel into a "#live" part
/// (upsampled path and signal skip) and a "#cond" part, so the condition
/// contribution can be computed once per day.
template <class T>
class PackedParameters {
 public:
  struct Split {
    Tensor<T> kernel;
    kernels::PackedWeights<T> packed;
  };

  PackedParameters() = default;
  explicit PackedParameters(const ModelParameters<T>& params) {
    for (const auto& e : params.entries()) {
      const auto& s = e.value.shape();
      if (e.spec.init == InitKind::FanIn && s.h * s.w > 0 && e.spec.name.ends_with(".w") && !is_dense(e.spec.name))
        packed_.emplace(e.spec.name, kernels::pack_kernel(e.value));
    }
    const auto& cfg = params.config();
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      const std::size_t live = 2 * cfg.width(l);
      for (const char* part : {".conv1.w", ".skip.w"}) {
        const std::string name = p + part;
        if (!params.contains(name)) continue;
        const auto& w = params.at(name);
        split_.emplace(name + "#live", slice_in(w, 0, live));
        split_.emplace(name + "#cond", slice_in(w, live, w.shape().c - live));
      }
    }
  }
  const kernels::PackedWeights<T>* find(const std::string& name) const {
    const auto it = packed_.find(name);
    return it == packed_.end() ? nullptr : &it->second;
  }
  const Split* split(const std::string& name) const {
    const auto it = split_.find(name);
    return it == split_.end() ? nullptr : &it->second;
  }
  std::size_t size() const noexcept { return packed_.size(); }

 private:
  static bool is_dense(const std::string& name) { return name.starts_with("emb.") || name.find(".norm") != std::string::npos; }
  static Split slice_in(const Tensor<T>& w, std::size_t c0, std::size_t count) {
    const auto& s = w.shape();
    Tensor<T> k(Shape4{s.n, count, s.h, s.w});
    const std::size_t per = s.h * s.w;
    for (std::size_t o = 0; o < s.n; ++o)
      std::copy_n(w.data() + (o * s.c + c0) * per, count * per, k.data() + o * count * per);
    auto packed = kernels::pack_kernel(k);
    return {std::move(k), std::move(packed)};
  }
  std::map<std::string, kernels::PackedWeights<T>> packed_;
  std::map<std::string, Split> split_;
};

/// Resolves parameter names to graph handles: differentiable leaves when
/// training, aliasing constants for inference.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const ModelParameters<T>& params, bool trainable,
              const PackedParameters<T>* packed = nullptr)
      : tape_(tape), params_(params), trainable_(trainable), packed_(packed) {}

  Var<T> operator()(const std::string& name) {
    const auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const auto& v = params_.at(name);
    auto var = trainable_ ? tape_.leaf_ref(v) : tape_.constant_ref(v);
    vars_.emplace(name, var);
    return var;
  }
  Tape<T>& tape() noexcept { return tape_; }
  const NetConfig& config() const noexcept { return params_.config(); }
  const kernels::PackedWeights<T>* packed(const std::string& name) const {
    return packed_ ? packed_->find(name) : nullptr;
  }
  const typename PackedParameters<T>::Split* split(const std::string& name) const {
    return packed_ && !trainable_ ? packed_->split(name) : nullptr;
  }

  /// Gradient per parameter in layout order; unused parameters get zeros.
  std::vector<Tensor<T>> gradients() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : params_.entries()) {
      const auto it = vars_.find(e.spec.name);
      out.push_back(it == vars_.end() ? Tensor<T>(e.value.shape()) : it->second.grad());
    }
    return out;
  }

 private:
  Tape<T>& tape_;
  const ModelParameters<T>& params_;
  bool trainable_;
  const PackedParameters<T>* packed_;
  std::map<std::string, Var<T>> vars_;
};

/// Two-layer projection of the sinusoidal features, one row per sample.
template <class T>
Var<T> noise_embedding(ParamBinder<T>& bind, const std::vector<double>& t) {
  const auto& cfg = bind.config();
  auto& tape = bind.tape();
  Tensor<T> feats(Shape4{t.size(), cfg.emb_dim, 1, 1});
  for (std::size_t n = 0; n < t.size(); ++n) {
    const auto f = sinusoidal_features<T>(t[n], cfg);
    std::copy(f.begin(), f.end(), feats.data() + n * cfg.emb_dim);
  }
  auto h = ops::dense(tape, tape.constant(std::move(feats)), bind("emb.fc1.w"), bind("emb.fc1.b"));
  return ops::dense(tape, ops::silu(tape, h), bind("emb.fc2.w"), bind("emb.fc2.b"));
}

/// Embedding of a single noise level, shape (1, emb_dim, 1, 1).
template <class T>
Tensor<T> noise_embedding(const ModelParameters<T>& params, double t) {
  Tape<T> tape(false);
  ParamBinder<T> bind(tape, params, false);
  return noise_embedding(bind, std::vector<double>{t}).value();
}

/// Group norm without built-in affine, then per-sample gamma/beta predicted
/// from the (activated) embedding: predictor output rows are [gamma | beta].
template <class T>
Var<T> adaptive_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& emb_act, const Var<T>& pred_w, const Var<T>& pred_b,
                     std::size_t groups, double eps) {
  const std::size_t c = x.shape().c;
  if (pred_w.shape().n != 2 * c)
    fail(ErrorKind::Shape, "affine predictor emits ", pred_w.shape().n, " values but the features have ", c, " channels");
  if (emb_act.shape().n != x.shape().n)
    fail(ErrorKind::Shape, "embedding batch ", emb_act.shape().n, " does not match feature batch ", x.shape().n);
  const auto affine = ops::dense(tape, emb_act, pred_w, pred_b);
  return ops::group_norm(tape, x, groups, ops::slice_channels(tape, affine, 0, c), ops::slice_channels(tape, affine, c, c),
                         eps);
}

namespace detail {

template <class T>
Var<T> conv(ParamBinder<T>& b, const std::string& p, const Var<T>& x, std::size_t stride = 1) {
  const auto name = p + ".w";
  return ops::conv2d(b.tape(), x, b(name), b(p + ".b"), stride, b.packed(name));
}

/// Adaptive when emb_act is valid; plain (learned per-channel affine) otherwise.
template <class T>
Var<T> norm(ParamBinder<T>& b, const std::string& p, const Var<T>& x, const Var<T>& emb_act) {
  const auto& cfg = b.config();
  if (emb_act.valid()) return adaptive_norm(b.tape(), x, emb_act, b(p + ".w"), b(p + ".b"), cfg.groups, cfg.eps);
  return ops::group_norm(b.tape(), x, cfg.groups, b(p + ".gamma"), b(p + ".beta"), cfg.eps);
}

template <class T>
Var<T> res_block(ParamBinder<T>& b, const std::string& p, const Var<T>& x, const Var<T>& emb_act) {
  auto& tape = b.tape();
  auto h = ops::silu(tape, norm(b, p + ".norm1", conv(b, p + ".conv1", x), emb_act));
  h = ops::silu(tape, norm(b, p + ".norm2", conv(b, p + ".conv2", h), emb_act));
  const auto skip = x.shape().c == h.shape().c ? x : conv(b, p + ".skip", x);
  return ops::add(tape, h, skip);
}

/// Per-level features of one encoder (before each downsampling).
template <class T>
std::vector<Var<T>> encode(ParamBinder<T>& b, const std::string& p, const Var<T>& x, const Var<T>& emb_act) {
  std::vector<Var<T>> skips;
  auto h = conv(b, p + ".in", x);
  for (std::size_t l = 0; l < kLevels; ++l) {
    const std::string lp = p + ".l" + std::to_string(l);
    h = res_block(b, lp, h, emb_act);
    skips.push_back(h);
    if (l + 1 < kLevels) h = conv(b, lp + ".down", h, 2);
  }
  return skips;
}

template <class T>
void check_inputs(const NetConfig& cfg, const Shape4& x, const Shape4* cond, std::size_t n_t) {
  if (x.c != cfg.in_channels)
    fail(ErrorKind::Shape, "state has ", x.c, " channels, net expects ", cfg.in_channels);
  if (n_t != x.n) fail(ErrorKind::Shape, "got ", n_t, " noise levels for a batch of ", x.n);
  if (cond) {
    if (cond->c != cfg.cond_channels())
      fail(ErrorKind::Shape, "condition has ", cond->c, " channels, net expects ", cfg.cond_channels());
    if (cond->n != x.n || cond->h != x.h || cond->w != x.w)
      fail(ErrorKind::Shape, "condition ", *cond, " does not match state ", x, " in batch/spatial extent");
  }
}

}  // namespace detail

/// Condition-encoder output, reusable across every integration step of a day.
/// With split decoder kernels available it also holds each decoder level's
/// condition-skip contribution to conv1 and to the 1x1 skip projection.
template <class T>
struct ConditionFeatures {
  std::vector<Var<T>> skips;
  std::vector<Var<T>> dec_conv1;
  std::vector<Var<T>> dec_skip;

  bool cached() const noexcept { return !dec_conv1.empty(); }
};

template <class T>
ConditionFeatures<T> encode_condition(ParamBinder<T>& bind, const Var<T>& cond) {
  if (cond.shape().c != bind.config().cond_channels())
    fail(ErrorKind::Shape, "condition has ", cond.shape().c, " channels, net expects ", bind.config().cond_channels());
  ConditionFeatures<T> cf{detail::encode(bind, "cond", cond, Var<T>{}), {}, {}};
  const auto* probe = bind.split("dec.l0.conv1.w#cond");
  if (!probe) return cf;
  auto& tape = bind.tape();
  const auto partial = [&](const std::string& name, const Var<T>& x) {
    const auto* sp = bind.split(name);
    if (!sp) fail(ErrorKind::Shape, "missing split kernel ", name);
    return ops::conv2d(tape, x, tape.constant_ref(sp->kernel), Var<T>{}, 1, &sp->packed);
  };
  for (std::size_t l = 0; l < kLevels; ++l) {
    const std::string p = "dec.l" + std::to_string(l);
    cf.dec_conv1.push_back(partial(p + ".conv1.w#cond", cf.skips[l]));
    cf.dec_skip.push_back(partial(p + ".skip.w#cond", cf.skips[l]));
  }
  return cf;
}

namespace detail {

/// Decoder block on concat(h, sig, cond skip) using the cached condition terms.
template <class T>
Var<T> cached_decoder_block(ParamBinder<T>& b, const std::string& p, const Var<T>& live, const Var<T>& cond_conv1,
                            const Var<T>& cond_skip, const Var<T>& emb_act) {
  auto& tape = b.tape();
  const auto part = [&](const std::string& name, const Var<T>& x, const Var<T>& cached) {
    const auto* sp = b.split(name + ".w#live");
    return ops::add(tape, ops::conv2d(tape, x, tape.constant_ref(sp->kernel), b(name + ".b"), 1, &sp->packed), cached);
  };
  auto h = ops::silu(tape, norm(b, p + ".norm1", part(p + ".conv1", live, cond_conv1), emb_act));
  h = ops::silu(tape, norm(b, p + ".norm2", conv(b, p + ".conv2", h), emb_act));
  return ops::add(tape, h, part(p + ".skip", live, cond_skip));
}

}  // namespace detail

/// Velocity from precomputed condition features.
template <class T>
Var<T> velocity(ParamBinder<T>& bind, const Var<T>& x, const std::vector<double>& t, const ConditionFeatures<T>& cf) {
  const auto& cfg = bind.config();
  detail::check_inputs<T>(cfg, x.shape(), nullptr, t.size());
  auto& tape = bind.tape();
  if (cf.skips.size() != kLevels || cf.skips[0].shape().n != x.shape().n || cf.skips[0].shape().h != x.shape().h ||
      cf.skips[0].shape().w != x.shape().w)
    fail(ErrorKind::Shape, "condition features do not match state ", x.shape());
  const auto emb_act = ops::silu(tape, noise_embedding(bind, t));
  const auto sig = detail::encode(bind, "sig", x, emb_act);

  const auto& xb = sig[kLevels - 1];
  ops::AttentionWeights<T> aw{bind("attn.q.w"), bind("attn.q.b"), bind("attn.k.w"), bind("attn.k.b"),
                              bind("attn.v.w"), bind("attn.v.b"), bind("attn.o.w"), bind("attn.o.b")};
  auto h = ops::self_attention(tape, xb, aw);
  for (std::size_t l = kLevels; l-- > 0;) {
    const std::string p = "dec.l" + std::to_string(l);
    if (cf.cached())
      h = detail::cached_decoder_block(bind, p, ops::concat_channels(tape, {h, sig[l]}), cf.dec_conv1[l], cf.dec_skip[l],
                                       emb_act);
    else
      h = detail::res_block(bind, p, ops::concat_channels(tape, {h, sig[l], cf.skips[l]}), emb_act);
    if (l > 0) {
      const auto& target = sig[l - 1].shape();
      h = detail::conv(bind, p + ".up", ops::upsample_nearest(tape, h, target.h, target.w));
    }
  }
  return detail::conv(bind, "out", h);
}

template <class T>
Var<T> forward(ParamBinder<T>& bind, const Var<T>& x, const std::vector<double>& t, const Var<T>& cond) {
  detail::check_inputs<T>(bind.config(), x.shape(), &cond.shape(), t.size());
  return velocity(bind, x, t, encode_condition(bind, cond));
}

/// Inference-only forward (no tape retained).
template <class T>
Tensor<T> forward(const ModelParameters<T>& params, const Tensor<T>& x, const std::vector<double>& t,
                  const Tensor<T>& cond) {
  Tape<T> tape(false);
  ParamBinder<T> bind(tape, params, false);
  return forward(bind, tape.constant_ref(x), t, tape.constant_ref(cond)).value();
}

}  // namespace fmcast

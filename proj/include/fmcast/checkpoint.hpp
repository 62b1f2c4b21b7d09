// Copyright 2026 The fmcast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include "fmcast/optimizer.hpp"
#include "fmcast/tensor_io.hpp"

namespace fmcast {

inline constexpr std::string_view kCheckpointMagic = "FMCPARM1";

struct Checkpoint {
  ModelParameters<float> params;
  std::optional<AdamState<float>> optimizer;
  std::size_t epoch = 0;   // epochs completed
  std::uint64_t step = 0;  // optimizer steps taken
  TextHeader header;
};

inline std::string shape_string(const Shape4& s) {
  return std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w);
}

/// Header, then float32 blocks: every parameter in layout order, then (when
/// present) the first-moment and second-moment blocks in the same order.
/// `extra` lines (seed lineage, config fingerprint) are merged into the header.
inline void save_checkpoint(const std::filesystem::path& path, const ModelParameters<float>& params,
                            const AdamState<float>* opt, std::size_t epoch, std::uint64_t step,
                            const TextHeader* extra = nullptr) {
  if (!params.all_finite()) fail(ErrorKind::NonFinite, "refusing to save non-finite parameters to ", path.string());
  TextHeader h;
  params.config().write(h);
  h.set_num("epoch", epoch);
  h.set_num("step", step);
  if (extra)
    for (const auto& [k, v] : extra->entries()) h.set(k, v);
  h.set_num("params", params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entries()[i];
    h.set("param." + std::to_string(i), e.spec.name + " " + shape_string(e.value.shape()));
  }
  const bool with_opt = opt && !opt->empty();
  h.set("optimizer", with_opt ? "adam" : "none");
  if (with_opt) h.set_num("optimizer.step", opt->step);
  h.set("payload", "f32le blocks");

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open ", path.string(), " for writing");
  write_preamble(os, kCheckpointMagic, h);
  for (const auto& e : params.entries()) io::put_f32_range(os, e.value.vec().begin(), e.value.vec().end());
  if (with_opt) {
    for (const auto& m : opt->m) io::put_f32_range(os, m.vec().begin(), m.vec().end());
    for (const auto& v : opt->v) io::put_f32_range(os, v.vec().begin(), v.vec().end());
  }
  if (!os) fail(ErrorKind::Io, "write failed for ", path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open checkpoint ", path.string());
  Checkpoint ck;
  ck.header = read_preamble(is, kCheckpointMagic, path.string());
  const auto& h = ck.header;
  ck.params = ModelParameters<float>(NetConfig::read(h));
  ck.epoch = static_cast<std::size_t>(h.get_int("epoch"));
  ck.step = static_cast<std::uint64_t>(h.get_int("step"));
  if (static_cast<std::size_t>(h.get_int("params")) != ck.params.size())
    fail(ErrorKind::Format, path.string(), ": header lists ", h.get("params"), " parameters, config implies ",
         ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& e = ck.params.entries()[i];
    const auto expect = e.spec.name + " " + shape_string(e.value.shape());
    if (h.get("param." + std::to_string(i)) != expect)
      fail(ErrorKind::Format, path.string(), ": parameter ", i, " is '", h.get("param." + std::to_string(i)),
           "', expected '", expect, "'");
  }
  const auto read_block = [&](Tensor<float>& t, const std::string& what) {
    std::vector<float> buf;
    const auto got = io::get_f32(is, buf, t.size());
    if (got != t.size())
      fail(ErrorKind::Shape, path.string(), ": payload ends inside block ", what, " (", got, " of ", t.size(), " values)");
    std::copy(buf.begin(), buf.end(), t.data());
    if (!t.all_finite()) fail(ErrorKind::NonFinite, path.string(), ": block ", what, " is not finite");
  };
  for (auto& e : ck.params.entries()) read_block(e.value, e.spec.name);
  const auto opt = h.get("optimizer");
  if (opt == "adam") {
    AdamState<float> st;
    st.step = static_cast<std::uint64_t>(h.get_int("optimizer.step"));
    for (const auto& e : ck.params.entries()) st.m.emplace_back(e.value.shape());
    for (const auto& e : ck.params.entries()) st.v.emplace_back(e.value.shape());
    for (std::size_t i = 0; i < st.m.size(); ++i) read_block(st.m[i], "m." + ck.params.entries()[i].spec.name);
    for (std::size_t i = 0; i < st.v.size(); ++i) read_block(st.v[i], "v." + ck.params.entries()[i].spec.name);
    ck.optimizer = std::move(st);
  } else if (opt != "none") {
    fail(ErrorKind::Format, path.string(), ": unknown optimizer block '", opt, "'");
  }
  if (is.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Shape, path.string(), ": trailing bytes after payload");
  return ck;
}

}  // namespace fmcast

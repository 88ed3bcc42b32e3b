// SPDX-License-Identifier: Apache-2.0
#pragma once

// DDTC distilled-set files.
//
// "DDTC" | u32 version | u32 C | u32 m | u32 M | u32 L | u32 d | u64 step |
// u32 json length | config JSON (UTF-8) | u64 embedding hash |
// M*L*d little-endian f32 (row-major) | M little-endian u16 labels.
//
// The JSON export carries the same fields with the matrices as nested arrays.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/distill.hpp"
#include "textdistill/model.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

inline constexpr std::uint32_t kArtifactVersion = 1;

namespace detail {

inline void check_distilled(std::size_t C, std::size_t m, std::size_t M, const std::vector<std::size_t>& labels,
                            Errc errc) {
  if (C < 1 || m < 1 || M != m * C) throw Error(errc, "inconsistent header: M != m * C");
  if (labels.size() != M) throw Error(errc, "label count differs from M");
  std::vector<std::size_t> counts(C, 0);
  for (auto y : labels) {
    if (y >= C) throw Error(errc, "label " + std::to_string(y) + " outside [0, C)");
    ++counts[y];
  }
  for (auto c : counts) {
    if (c != m) throw Error(errc, "labels are not balanced at m per class");
  }
}

}  // namespace detail

template <class T>
std::string serialize_artifact(const DistilledSet<T>& d) {
  if (d.labels.size() > std::numeric_limits<std::uint16_t>::max() || d.num_classes > 65535) {
    throw Error(Errc::InvalidConfig, "too many samples or classes for the artifact format");
  }
  detail::check_distilled(d.num_classes, d.per_class, d.size(), d.labels, Errc::InvalidConfig);
  std::string out = "DDTC";
  detail::put_le<std::uint32_t>(out, kArtifactVersion);
  for (std::size_t v : {d.num_classes, d.per_class, d.size(), d.max_len(), d.dim()}) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  detail::put_le<std::uint64_t>(out, d.step);
  const std::string cfg = d.config.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint64_t>(out, d.embedding_hash);
  for (T v : d.samples.values()) detail::put_f32(out, static_cast<float>(v));
  for (auto y : d.labels) detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(y));
  return out;
}

/// Throws CorruptArtifact on a bad magic, unknown version, inconsistent header,
/// wrong length, non-finite values or unbalanced labels.
inline DistilledSet<float> parse_artifact(std::string_view data) {
  detail::Reader r(data, Errc::CorruptArtifact);
  if (r.bytes(4) != "DDTC") throw Error(Errc::CorruptArtifact, "bad artifact magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kArtifactVersion) {
    throw Error(Errc::CorruptArtifact, "unsupported artifact version " + std::to_string(version));
  }
  const std::size_t C = r.get<std::uint32_t>(), m = r.get<std::uint32_t>(), M = r.get<std::uint32_t>();
  const std::size_t L = r.get<std::uint32_t>(), d = r.get<std::uint32_t>();
  DistilledSet<float> out;
  out.num_classes = C;
  out.per_class = m;
  out.step = r.get<std::uint64_t>();
  const auto json_len = r.get<std::uint32_t>();
  try {
    out.config = nlohmann::json::parse(r.bytes(json_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptArtifact, std::string("config block: ") + e.what());
  }
  out.embedding_hash = r.get<std::uint64_t>();
  if (C < 1 || m < 1 || M != m * C || L < 1 || d < 1) throw Error(Errc::CorruptArtifact, "inconsistent header");
  const std::size_t n = M * L * d;
  if (r.remaining() != n * 4 + M * 2) {
    throw Error(Errc::CorruptArtifact, "payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                                           std::to_string(n * 4 + M * 2));
  }
  std::vector<float> values(n);
  for (auto& v : values) {
    v = r.get_f32();
    if (!std::isfinite(v)) throw Error(Errc::CorruptArtifact, "non-finite matrix entry");
  }
  for (std::size_t i = 0; i < M; ++i) out.labels.push_back(r.get<std::uint16_t>());
  detail::check_distilled(C, m, M, out.labels, Errc::CorruptArtifact);
  out.samples = Tensor<float>({M, L, d}, std::move(values));
  return out;
}

template <class T>
void save_artifact(const std::filesystem::path& path, const DistilledSet<T>& d) {
  write_file_atomic(path, serialize_artifact(d));
}

inline DistilledSet<float> load_artifact(const std::filesystem::path& path) { return parse_artifact(read_file(path)); }

/// Lossless JSON mirror; float values survive the double round trip exactly.
inline nlohmann::json export_json(const DistilledSet<float>& d) {
  nlohmann::json samples = nlohmann::json::array();
  const auto& v = d.samples.values();
  const std::size_t L = d.max_len(), D = d.dim();
  for (std::size_t i = 0; i < d.size(); ++i) {
    nlohmann::json matrix = nlohmann::json::array();
    for (std::size_t t = 0; t < L; ++t) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t k = 0; k < D; ++k) row.push_back(static_cast<double>(v[(i * L + t) * D + k]));
      matrix.push_back(std::move(row));
    }
    samples.push_back(std::move(matrix));
  }
  return {{"format", "DDTC"},
          {"version", kArtifactVersion},
          {"num_classes", d.num_classes},
          {"per_class", d.per_class},
          {"size", d.size()},
          {"max_len", L},
          {"dim", D},
          {"step", d.step},
          {"embedding_hash", hex64(d.embedding_hash)},
          {"config", d.config},
          {"labels", d.labels},
          {"samples", std::move(samples)}};
}

inline DistilledSet<float> import_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "DDTC" || j.at("version") != kArtifactVersion) {
      throw Error(Errc::CorruptArtifact, "not a DDTC export");
    }
    DistilledSet<float> d;
    d.num_classes = j.at("num_classes").get<std::size_t>();
    d.per_class = j.at("per_class").get<std::size_t>();
    d.step = j.at("step").get<std::uint64_t>();
    d.embedding_hash = std::stoull(j.at("embedding_hash").get<std::string>(), nullptr, 16);
    d.config = j.at("config");
    d.labels = j.at("labels").get<std::vector<std::size_t>>();
    const std::size_t M = j.at("size").get<std::size_t>(), L = j.at("max_len").get<std::size_t>(),
                      D = j.at("dim").get<std::size_t>();
    detail::check_distilled(d.num_classes, d.per_class, M, d.labels, Errc::CorruptArtifact);
    const auto& samples = j.at("samples");
    if (samples.size() != M) throw Error(Errc::CorruptArtifact, "sample count differs from size");
    std::vector<float> values;
    values.reserve(M * L * D);
    for (const auto& matrix : samples) {
      if (matrix.size() != L) throw Error(Errc::CorruptArtifact, "matrix row count differs from max_len");
      for (const auto& row : matrix) {
        if (row.size() != D) throw Error(Errc::CorruptArtifact, "matrix column count differs from dim");
        for (const auto& x : row) values.push_back(static_cast<float>(x.get<double>()));
      }
    }
    d.samples = Tensor<float>({M, L, D}, std::move(values));
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptArtifact, std::string("malformed export: ") + e.what());
  } catch (const std::logic_error&) {
    throw Error(Errc::CorruptArtifact, "malformed embedding hash");
  }
}

}  // namespace textdistill

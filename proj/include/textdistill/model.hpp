// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single-layer TextCNN: parallel filter widths over the embedding matrix,
// relu, max-over-time pooling and a linear head. No dropout or weight decay.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/autograd.hpp"
#include "textdistill/json_util.hpp"
#include "textdistill/textdata.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

/// Named parameter tensors in a fixed order.
template <class T>
struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const { return tensors.size(); }

  const Tensor<T>& at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw Error(Errc::ShapeMismatch, "no parameter named " + name);
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  /// Copies as fresh leaves.
  ModelParams detach(bool requires_grad = false) const {
    ModelParams out{names, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.detach(requires_grad));
    return out;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(numel());
    for (const auto& t : tensors) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
  }
};

template <class T>
bool operator==(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (a.names != b.names) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.tensors[i].shape() != b.tensors[i].shape()) return false;
    if (!std::equal(a.tensors[i].values().begin(), a.tensors[i].values().end(), b.tensors[i].values().begin()))
      return false;
  }
  return true;
}

/// theta - lr * grads, elementwise per tensor. Stays on the graph when the
/// inputs do.
template <class T>
ModelParams<T> sgd_update(const ModelParams<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  ModelParams<T> out{params.names, {}};
  out.tensors.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) out.tensors.push_back(sub(params.tensors[i], scale(grads[i], lr)));
  return out;
}

/// A classifier that maps a [B x L x d] batch to [B x C] logits.
template <class M, class T>
concept Classifier = requires(const M& model, const ModelParams<T>& params, const Tensor<T>& batch,
                              std::uint64_t seed) {
  { model.forward(params, batch) } -> std::same_as<Tensor<T>>;
  { model.template init_params<T>(seed) } -> std::same_as<ModelParams<T>>;
  { model.num_classes() } -> std::convertible_to<std::size_t>;
};

struct ModelConfig {
  std::size_t dim = 100;
  std::vector<std::size_t> widths{3, 4, 5};
  std::size_t channels = 32;
  std::size_t num_classes = 2;
  std::size_t max_len = 64;

  void validate() const {
    if (dim < 1) throw Error(Errc::InvalidConfig, "model.dim must be >= 1");
    if (widths.empty()) throw Error(Errc::InvalidConfig, "model.widths is empty");
    for (auto h : widths) {
      if (h < 1 || h > max_len) throw Error(Errc::InvalidConfig, "filter width " + std::to_string(h) + " outside [1, L]");
    }
    if (channels < 1) throw Error(Errc::InvalidConfig, "model.channels must be >= 1");
    if (num_classes < 2) throw Error(Errc::InvalidConfig, "model needs at least two classes");
  }

  nlohmann::json to_json() const {
    return {{"dim", dim}, {"widths", widths}, {"channels", channels}, {"num_classes", num_classes},
            {"max_len", max_len}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j) {
    json_util::reject_unknown_keys(j, {"dim", "widths", "channels", "num_classes", "max_len"}, "model");
    ModelConfig c;
    json_util::read(j, "dim", c.dim, "model");
    json_util::read(j, "widths", c.widths, "model");
    json_util::read(j, "channels", c.channels, "model");
    json_util::read(j, "num_classes", c.num_classes, "model");
    json_util::read(j, "max_len", c.max_len, "model");
    return c;
  }

  std::uint64_t hash() const { return Fnv1a().update(to_json().dump()).digest(); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

class TextCnn {
 public:
  explicit TextCnn(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

  const ModelConfig& config() const { return config_; }
  std::size_t num_classes() const { return config_.num_classes; }

  std::vector<std::pair<std::string, Shape>> param_shapes() const {
    std::vector<std::pair<std::string, Shape>> shapes;
    for (auto h : config_.widths) {
      shapes.emplace_back("conv" + std::to_string(h) + ".weight", Shape{h, config_.dim, config_.channels});
      shapes.emplace_back("conv" + std::to_string(h) + ".bias", Shape{config_.channels});
    }
    shapes.emplace_back("fc.weight", Shape{config_.widths.size() * config_.channels, config_.num_classes});
    shapes.emplace_back("fc.bias", Shape{config_.num_classes});
    return shapes;
  }

  /// Glorot-uniform weights, zero biases. Conv fans follow the usual
  /// kernel-size convention: fan_in = h*d, fan_out = h*c.
  template <class T>
  ModelParams<T> init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    for (auto& [name, shape] : param_shapes()) {
      std::vector<T> values(numel_of(shape), T(0));
      if (shape.size() > 1) {
        double fan_in = 0, fan_out = 0;
        if (shape.size() == 3) {
          fan_in = static_cast<double>(shape[0] * shape[1]);
          fan_out = static_cast<double>(shape[0] * shape[2]);
        } else {
          fan_in = static_cast<double>(shape[0]);
          fan_out = static_cast<double>(shape[1]);
        }
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (auto& v : values) v = static_cast<T>(dist(rng));
      }
      p.names.push_back(name);
      p.tensors.emplace_back(shape, std::move(values));
    }
    return p;
  }

  template <class T>
  Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& batch) const {
    if (batch.rank() != 3 || batch.dim(1) != config_.max_len || batch.dim(2) != config_.dim) {
      throw Error(Errc::ShapeMismatch, "TextCnn expects [B x " + std::to_string(config_.max_len) + " x " +
                                           std::to_string(config_.dim) + "], got " + shape_str(batch.shape()));
    }
    if (params.size() != 2 * config_.widths.size() + 2) throw Error(Errc::ShapeMismatch, "parameter count");
    std::vector<Tensor<T>> pooled;
    pooled.reserve(config_.widths.size());
    for (std::size_t k = 0; k < config_.widths.size(); ++k) {
      auto conv = conv1d_valid(batch, params.tensors[2 * k], params.tensors[2 * k + 1]);
      pooled.push_back(max_over_time(relu(conv)));
    }
    auto features = pooled.size() == 1 ? pooled.front() : concat_cols(pooled);
    return affine(features, params.tensors[params.size() - 2], params.tensors.back());
  }

 private:
  ModelConfig config_;
};

template <class T, class M>
  requires Classifier<M, T>
Tensor<T> model_loss(const M& model, const ModelParams<T>& params, const Tensor<T>& batch,
                     const std::vector<std::size_t>& labels) {
  return softmax_cross_entropy(model.forward(params, batch), labels);
}

/// Index of the largest logit per row; ties go to the lowest class index.
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 1; j < cols; ++j)
      if (logits[i * cols + j] > logits[i * cols + out[i]]) out[i] = j;
  }
  return out;
}

/// Fraction of `ds` classified correctly.
template <class T, class M>
  requires Classifier<M, T>
double accuracy(const M& model, const ModelParams<T>& params, const Dataset& ds, const EmbeddingTable& table,
                std::size_t batch_size = 256) {
  if (ds.empty()) throw Error(Errc::EmptyDataset, "accuracy over an empty dataset");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    auto pred = argmax_rows(model.forward(params, embed_examples<T>(ds, idx, table)));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == ds.examples[idx[k]].label;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "TCNN" | u32 version | u32 json length | model config JSON |
// u32 tensor count | per tensor: u32 name length, name, u32 rank, u32 dims...,
// little-endian f32 values.

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_le(out, bits);
}

class Reader {
 public:
  Reader(std::string_view data, Errc on_error) : data_(data), errc_(on_error) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  float get_f32() {
    const auto bits = get<std::uint32_t>();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(errc_, "truncated data");
  }

  std::string_view data_;
  Errc errc_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::string serialize_checkpoint(const ModelConfig& config, const ModelParams<T>& params) {
  std::string out = "TCNN";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config.to_json().dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.names[i].size()));
    out += params.names[i];
    const auto& t = params.tensors[i];
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : t.values()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <class T>
std::pair<ModelConfig, ModelParams<T>> parse_checkpoint(std::string_view data) {
  detail::Reader r(data, Errc::CorruptArtifact);
  if (r.bytes(4) != "TCNN") throw Error(Errc::CorruptArtifact, "bad checkpoint magic");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error(Errc::CorruptArtifact, "unsupported checkpoint version");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(r.bytes(r.get<std::uint32_t>())));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptArtifact, std::string("checkpoint config: ") + e.what());
  }
  ModelParams<T> params;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    params.names.emplace_back(r.bytes(r.get<std::uint32_t>()));
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::vector<T> values(numel_of(shape));
    for (auto& v : values) v = static_cast<T>(r.get_f32());
    params.tensors.emplace_back(std::move(shape), std::move(values));
  }
  if (r.remaining() != 0) throw Error(Errc::CorruptArtifact, "trailing bytes in checkpoint");
  return {config, std::move(params)};
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams<T>& params) {
  write_file_atomic(path, serialize_checkpoint(config, params));
}

template <class T>
std::pair<ModelConfig, ModelParams<T>> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<T>(read_file(path));
}

}  // namespace textdistill

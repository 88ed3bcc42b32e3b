// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text dataset distillation. A small set of synthetic L x d matrices with fixed
// labels is optimized so that a model trained on it by a few unrolled SGD steps
// does well on real data. The meta-gradient flows back through every recorded
// inner update (create_graph), so it includes the second-order terms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/autograd.hpp"
#include "textdistill/json_util.hpp"
#include "textdistill/model.hpp"
#include "textdistill/textdata.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

enum class InitMode { GaussianMatched, RealSample };
enum class ThetaInit { Resample, Fixed };
enum class OuterOptimizer { Sgd, Momentum, Adam };

inline const char* to_string(InitMode m) { return m == InitMode::GaussianMatched ? "gaussian" : "real-sample"; }
inline const char* to_string(ThetaInit m) { return m == ThetaInit::Resample ? "resample" : "fixed"; }
inline const char* to_string(OuterOptimizer m) {
  switch (m) {
    case OuterOptimizer::Sgd: return "sgd";
    case OuterOptimizer::Momentum: return "momentum";
    case OuterOptimizer::Adam: return "adam";
  }
  return "sgd";
}

namespace detail {

template <class E, std::size_t N>
E parse_enum(const nlohmann::json& j, const char* key, E fallback, const std::array<E, N>& options) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_string()) throw Error(Errc::InvalidConfig, std::string("distill.") + key + " must be a string");
  for (E e : options) {
    if (it->template get<std::string>() == to_string(e)) return e;
  }
  throw Error(Errc::InvalidConfig, std::string("distill.") + key + ": unknown value '" + it->template get<std::string>() + "'");
}

// Seed streams; every random draw in a run derives from (seed, stream, index).
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kThetaStream = 2;
inline constexpr std::uint64_t kOrderStream = 3;
inline constexpr std::uint64_t kRealStream = 4;

}  // namespace detail

struct DistillConfig {
  std::size_t per_class = 1;
  std::size_t max_len = 64;
  std::size_t dim = 100;
  double inner_lr = 0.1;
  double outer_lr = 0.05;
  std::size_t inner_epochs = 1;
  std::size_t inner_batch = 0;  // 0: the whole distilled set in one batch
  std::size_t outer_steps = 100;
  std::size_t outer_epochs = 0;  // > 0: T2 is this many passes over the real data
  std::size_t real_batch = 64;
  InitMode init = InitMode::GaussianMatched;
  ThetaInit theta_init = ThetaInit::Resample;
  OuterOptimizer optimizer = OuterOptimizer::Sgd;
  double momentum = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_halvings = 3;
  // Bound on T1 x |theta|, the parameter copies kept alive by full unrolling.
  std::size_t memory_budget = std::size_t{1} << 28;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, "distill." + msg); };
    if (per_class < 1) fail("per_class must be >= 1");
    if (max_len < 1 || dim < 1) fail("max_len and dim must be >= 1");
    if (!(inner_lr >= 0) || !std::isfinite(inner_lr)) fail("inner_lr must be finite and >= 0");
    if (!(outer_lr >= 0) || !std::isfinite(outer_lr)) fail("outer_lr must be finite and >= 0");
    if (inner_epochs < 1) fail("inner_epochs must be >= 1");
    if (real_batch < 1) fail("real_batch must be >= 1");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (!(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) fail("adam settings out of range");
  }

  std::size_t batch_for(std::size_t M) const { return inner_batch == 0 || inner_batch > M ? M : inner_batch; }

  /// T1 for a distilled set of M samples.
  std::size_t inner_steps(std::size_t M) const {
    const std::size_t b = batch_for(M);
    return inner_epochs * ((M + b - 1) / b);
  }

  /// T2 given the real training-set size.
  std::size_t total_outer_steps(std::size_t n_real) const {
    if (outer_epochs == 0) return outer_steps;
    return outer_epochs * ((n_real + real_batch - 1) / real_batch);
  }

  nlohmann::json to_json() const {
    return {{"per_class", per_class},
            {"max_len", max_len},
            {"dim", dim},
            {"inner_lr", inner_lr},
            {"outer_lr", outer_lr},
            {"inner_epochs", inner_epochs},
            {"inner_batch", inner_batch},
            {"outer_steps", outer_steps},
            {"outer_epochs", outer_epochs},
            {"real_batch", real_batch},
            {"init", to_string(init)},
            {"theta_init", to_string(theta_init)},
            {"optimizer", to_string(optimizer)},
            {"momentum", momentum},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"max_halvings", max_halvings},
            {"memory_budget", memory_budget},
            {"seed", seed}};
  }

  static DistillConfig from_json(const nlohmann::json& j) {
    json_util::reject_unknown_keys(
        j,
        {"per_class", "max_len", "dim", "inner_lr", "outer_lr", "inner_epochs", "inner_batch", "outer_steps",
         "outer_epochs", "real_batch", "init", "theta_init", "optimizer", "momentum", "adam_beta2", "adam_eps",
         "max_halvings", "memory_budget", "seed"},
        "distill");
    DistillConfig c;
    const char* s = "distill";
    json_util::read(j, "per_class", c.per_class, s);
    json_util::read(j, "max_len", c.max_len, s);
    json_util::read(j, "dim", c.dim, s);
    json_util::read(j, "inner_lr", c.inner_lr, s);
    json_util::read(j, "outer_lr", c.outer_lr, s);
    json_util::read(j, "inner_epochs", c.inner_epochs, s);
    json_util::read(j, "inner_batch", c.inner_batch, s);
    json_util::read(j, "outer_steps", c.outer_steps, s);
    json_util::read(j, "outer_epochs", c.outer_epochs, s);
    json_util::read(j, "real_batch", c.real_batch, s);
    c.init = detail::parse_enum(j, "init", c.init,
                                std::array{InitMode::GaussianMatched, InitMode::RealSample});
    c.theta_init = detail::parse_enum(j, "theta_init", c.theta_init,
                                      std::array{ThetaInit::Resample, ThetaInit::Fixed});
    c.optimizer = detail::parse_enum(j, "optimizer", c.optimizer,
                                     std::array{OuterOptimizer::Sgd, OuterOptimizer::Momentum, OuterOptimizer::Adam});
    json_util::read(j, "momentum", c.momentum, s);
    json_util::read(j, "adam_beta2", c.adam_beta2, s);
    json_util::read(j, "adam_eps", c.adam_eps, s);
    json_util::read(j, "max_halvings", c.max_halvings, s);
    json_util::read(j, "memory_budget", c.memory_budget, s);
    json_util::read(j, "seed", c.seed, s);
    return c;
  }

  friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

/// M = m*C synthetic matrices stored as one [M x L x d] tensor. Labels are
/// class-blocked: sample i belongs to class i / m.
template <class T = float>
struct DistilledSet {
  Tensor<T> samples;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::size_t per_class = 0;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t step = 0;
  std::uint64_t embedding_hash = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t max_len() const { return samples.dim(1); }
  std::size_t dim() const { return samples.dim(2); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto y : labels) ++counts[y];
    return counts;
  }

  friend bool operator==(const DistilledSet& a, const DistilledSet& b) {
    return a.labels == b.labels && a.num_classes == b.num_classes && a.per_class == b.per_class &&
           a.config == b.config && a.step == b.step && a.embedding_hash == b.embedding_hash &&
           a.samples.shape() == b.samples.shape() && a.samples.to_vector() == b.samples.to_vector();
  }
};

struct EmbeddingStats {
  double mean = 0;
  double stddev = 1;
};

inline EmbeddingStats stats_of(const EmbeddingTable& table) { return {table.mean, table.stddev}; }

/// Gaussian mode draws every entry from Normal(mean, stddev^2). Real-sample mode
/// copies the embedded matrix of a random training example of the same class.
template <class T = float>
DistilledSet<T> init_distilled(const DistillConfig& cfg, std::size_t num_classes, EmbeddingStats stats,
                               std::uint64_t seed, const Dataset* data = nullptr,
                               const EmbeddingTable* table = nullptr) {
  cfg.validate();
  if (num_classes < 1) throw Error(Errc::InvalidConfig, "distilled set needs at least one class");
  const std::size_t M = cfg.per_class * num_classes, L = cfg.max_len, d = cfg.dim;
  DistilledSet<T> out;
  out.num_classes = num_classes;
  out.per_class = cfg.per_class;
  out.config = cfg.to_json();
  for (std::size_t i = 0; i < M; ++i) out.labels.push_back(i / cfg.per_class);

  std::mt19937_64 rng(seed);
  std::vector<T> values(M * L * d);
  if (cfg.init == InitMode::GaussianMatched) {
    std::normal_distribution<double> normal(stats.mean, stats.stddev);
    for (auto& v : values) v = static_cast<T>(normal(rng));
  } else {
    if (data == nullptr || table == nullptr) {
      throw Error(Errc::RealSampleModeNeedsDataset, "real-sample initialization needs a dataset and embeddings");
    }
    if (data->max_len != L || table->dim != d) throw Error(Errc::ShapeMismatch, "dataset does not match L x d");
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < data->size(); ++i) {
      if (data->examples[i].label < num_classes) by_class[data->examples[i].label].push_back(i);
    }
    for (std::size_t i = 0; i < M; ++i) {
      const auto& pool = by_class[out.labels[i]];
      if (pool.empty()) throw Error(Errc::ClassTooSmall, "class " + std::to_string(out.labels[i]) + " has no examples");
      const std::size_t pick = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      for (std::size_t t = 0; t < L; ++t) {
        const auto row = table->row(data->examples[pick].ids[t]);
        for (std::size_t k = 0; k < d; ++k) values[(i * L + t) * d + k] = static_cast<T>(row[k]);
      }
    }
  }
  out.samples = Tensor<T>({M, L, d}, std::move(values));
  return out;
}

/// How the inner loop walks the distilled set. When the batch is smaller than
/// M, each epoch uses a permutation seeded by derive_seed(order_seed, epoch).
struct InnerSpec {
  double lr = 0.1;
  std::size_t epochs = 1;
  std::size_t batch = 0;
  std::uint64_t order_seed = 0;
};

/// Theta_T1: epochs * ceil(M / batch) sequential SGD steps from theta0. With
/// `record` every step stays on the graph (create_graph), so the result is a
/// differentiable function of `samples`; otherwise the result is detached.
template <class T, class Model>
  requires Classifier<Model, T>
ModelParams<T> inner_train(const Model& model, const ModelParams<T>& theta0, const Tensor<T>& samples,
                           const std::vector<std::size_t>& labels, const InnerSpec& spec, bool record) {
  if (samples.rank() != 3 || samples.dim(0) != labels.size() || labels.empty()) {
    throw Error(Errc::ShapeMismatch, "inner_train: samples " + shape_str(samples.shape()) + " vs " +
                                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  const std::size_t batch = spec.batch == 0 || spec.batch > n ? n : spec.batch;
  const Tensor<T> data = record ? samples : samples.detach();
  ModelParams<T> params = theta0.detach(true);
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (batch < n) {
      std::mt19937_64 rng(derive_seed(spec.order_seed, epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      Tensor<T> x = data;
      std::vector<std::size_t> y = labels;
      if (batch < n) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
        x = index_select0(data, idx);
        y.clear();
        for (auto i : idx) y.push_back(labels[i]);
      }
      auto loss = model_loss(model, params, x, y);
      auto grads = backward(loss, params.tensors, record);
      if (record) {
        params = sgd_update(params, grads, spec.lr);
      } else {
        NoGradGuard no_grad;
        params = sgd_update(params, grads, spec.lr).detach(true);
      }
    }
  }
  return record ? params : params.detach(false);
}

/// Classification loss of the inner-trained model on a real batch.
template <class T, class Model>
  requires Classifier<Model, T>
Tensor<T> outer_loss(const Model& model, const ModelParams<T>& trained, const Tensor<T>& real_x,
                     const std::vector<std::size_t>& real_y) {
  return model_loss(model, trained, real_x, real_y);
}

/// d outer_loss / d samples through the recorded inner loop.
template <class T>
Tensor<T> meta_gradient(const Tensor<T>& loss, const Tensor<T>& samples) {
  if (!loss.requires_grad()) {
    throw Error(Errc::DetachedGraph, "outer loss has no recorded inner graph; run inner_train with record=true");
  }
  return grad(loss, samples);
}

/// Initial parameters for an outer step: a fresh draw per step, or one fixed draw.
template <class T, class Model>
  requires Classifier<Model, T>
ModelParams<T> theta_for_step(const Model& model, const DistillConfig& cfg, std::uint64_t step) {
  const std::uint64_t index = cfg.theta_init == ThetaInit::Resample ? step : 0;
  return model.template init_params<T>(derive_seed(cfg.seed, detail::kThetaStream, index));
}

inline InnerSpec inner_spec_for(const DistillConfig& cfg, std::uint64_t step) {
  return {cfg.inner_lr, cfg.inner_epochs, cfg.inner_batch, derive_seed(cfg.seed, detail::kOrderStream, step)};
}

struct StepMetrics {
  std::uint64_t step = 0;
  double outer_loss = 0;
  double grad_norm = 0;
  double outer_lr = 0;
};

/// Outer optimizer state; unused by plain SGD.
struct OuterState {
  std::vector<double> first;
  std::vector<double> second;
  std::uint64_t t = 0;
};

/// One outer update D <- D - outer_lr * dL/dD (or the momentum/adam variant).
/// Throws NonFiniteGradient and leaves `dtilde` and `state` untouched when any
/// part of the step overflows.
template <class T, class Model>
  requires Classifier<Model, T>
StepMetrics distill_step(const Model& model, DistilledSet<T>& dtilde, const ModelParams<T>& theta0,
                         const Tensor<T>& real_x, const std::vector<std::size_t>& real_y, const DistillConfig& cfg,
                         double outer_lr, OuterState& state) {
  const auto samples = dtilde.samples.detach(true);
  double loss_value = 0;
  std::vector<double> g;
  try {
    auto trained = inner_train(model, theta0, samples, dtilde.labels, inner_spec_for(cfg, dtilde.step), true);
    auto loss = outer_loss(model, trained, real_x, real_y);
    loss_value = static_cast<double>(loss.item());
    auto grad_tensor = meta_gradient(loss, samples);
    g.assign(grad_tensor.values().begin(), grad_tensor.values().end());
  } catch (const Error& e) {
    if (e.code() != Errc::NonFiniteResult) throw;
    throw Error(Errc::NonFiniteGradient, std::string("distill step diverged: ") + e.what());
  }
  double norm2 = 0;
  for (double v : g) norm2 += v * v;
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) throw Error(Errc::NonFiniteGradient, "meta-gradient is not finite");

  OuterState next = state;
  std::vector<double> direction = g;
  if (cfg.optimizer != OuterOptimizer::Sgd) {
    if (next.first.empty()) next.first.assign(g.size(), 0.0);
    if (next.second.empty() && cfg.optimizer == OuterOptimizer::Adam) next.second.assign(g.size(), 0.0);
    ++next.t;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (cfg.optimizer == OuterOptimizer::Momentum) {
        next.first[i] = cfg.momentum * next.first[i] + g[i];
        direction[i] = next.first[i];
      } else {
        next.first[i] = cfg.momentum * next.first[i] + (1 - cfg.momentum) * g[i];
        next.second[i] = cfg.adam_beta2 * next.second[i] + (1 - cfg.adam_beta2) * g[i] * g[i];
        const double mhat = next.first[i] / (1 - std::pow(cfg.momentum, static_cast<double>(next.t)));
        const double vhat = next.second[i] / (1 - std::pow(cfg.adam_beta2, static_cast<double>(next.t)));
        direction[i] = mhat / (std::sqrt(vhat) + cfg.adam_eps);
      }
    }
  }

  const auto& old = dtilde.samples.values();
  std::vector<T> updated(old.size());
  for (std::size_t i = 0; i < old.size(); ++i) {
    updated[i] = outer_lr == 0 ? old[i] : static_cast<T>(old[i] - outer_lr * direction[i]);
    if (!std::isfinite(static_cast<double>(updated[i]))) {
      throw Error(Errc::NonFiniteGradient, "outer update produced a non-finite value");
    }
  }
  dtilde.samples = Tensor<T>(dtilde.samples.shape(), std::move(updated));
  state = std::move(next);
  StepMetrics metrics{dtilde.step, loss_value, norm, outer_lr};
  ++dtilde.step;
  return metrics;
}

/// Full procedure: T2 outer steps over shuffled real batches. A diverging step
/// is retried with half the outer step size (the halved value is kept) up to
/// cfg.max_halvings times, after which NonFiniteGradient propagates.
template <class T, class Model>
  requires Classifier<Model, T>
DistilledSet<T> run_distillation(const Model& model, const Dataset& train, const EmbeddingTable& table,
                                 const DistillConfig& cfg,
                                 const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  if (train.empty()) throw Error(Errc::EmptyDataset, "distillation needs real training data");
  if (train.max_len != cfg.max_len || table.dim != cfg.dim) {
    throw Error(Errc::ShapeMismatch, "distill L x d does not match the dataset/embeddings");
  }
  if (model.num_classes() != train.num_classes) throw Error(Errc::ShapeMismatch, "model and dataset class counts differ");
  const std::size_t M = cfg.per_class * train.num_classes;
  const std::size_t theta_size = model.template init_params<T>(0).numel();
  if (cfg.inner_steps(M) * theta_size > cfg.memory_budget) {
    throw Error(Errc::InvalidConfig, "unrolled inner loop needs " + std::to_string(cfg.inner_steps(M) * theta_size) +
                                         " parameter entries, over distill.memory_budget");
  }

  auto dtilde = init_distilled<T>(cfg, train.num_classes, stats_of(table),
                                  derive_seed(cfg.seed, detail::kInitStream), &train, &table);
  dtilde.embedding_hash = table.hash();
  BatchIterator batches(train, cfg.real_batch, derive_seed(cfg.seed, detail::kRealStream));
  OuterState state;
  double lr = cfg.outer_lr;
  std::size_t halvings = 0;
  const std::size_t steps = cfg.total_outer_steps(train.size());
  for (std::size_t s = 0; s < steps; ++s) {
    const Batch batch = batches.next();
    const auto x = embed_examples<T>(train, batch.indices, table);
    const auto theta0 = theta_for_step<T>(model, cfg, dtilde.step);
    StepMetrics metrics;
    for (;;) {
      try {
        metrics = distill_step(model, dtilde, theta0, x, batch.labels, cfg, lr, state);
        break;
      } catch (const Error& e) {
        if (e.code() != Errc::NonFiniteGradient || halvings >= cfg.max_halvings) throw;
        lr *= 0.5;
        ++halvings;
      }
    }
    if (on_step) on_step(metrics);
  }
  return dtilde;
}

/// Central differences of the outer loss with respect to every distilled entry,
/// re-running the unrecorded inner loop per perturbation with the same order.
template <class T, class Model>
  requires Classifier<Model, T>
std::vector<double> meta_grad_fd_oracle(const Model& model, const Tensor<T>& samples, const std::vector<std::size_t>& labels,
                                        const ModelParams<T>& theta0, const Tensor<T>& real_x,
                                        const std::vector<std::size_t>& real_y, const InnerSpec& spec,
                                        double h = 1e-4) {
  constexpr std::size_t kMaxEntries = 2000;
  if (samples.numel() > kMaxEntries) {
    throw Error(Errc::TooLargeForOracle, std::to_string(samples.numel()) + " distilled entries exceed the oracle limit");
  }
  auto loss_at = [&](const std::vector<T>& values) {
    Tensor<T> x(samples.shape(), values);
    return static_cast<double>(
        outer_loss(model, inner_train(model, theta0, x, labels, spec, false), real_x.detach(), real_y).item());
  };
  std::vector<double> out(samples.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto values = samples.to_vector();
    const T x = values[i];
    const double step = h * std::max(1.0, std::abs(static_cast<double>(x)));
    values[i] = static_cast<T>(x + step);
    const double up = loss_at(values);
    values[i] = static_cast<T>(x - step);
    const double down = loss_at(values);
    out[i] = (up - down) / (2 * step);
  }
  return out;
}

}  // namespace textdistill

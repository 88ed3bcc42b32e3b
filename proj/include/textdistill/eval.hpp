// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation protocol: the same TextCNN and SGD procedure trained on the full
// data, a class-balanced random subset, and the distilled set; then test
// accuracy, per-epoch curves and size sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/distill.hpp"
#include "textdistill/json_util.hpp"
#include "textdistill/model.hpp"
#include "textdistill/textdata.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

struct EvalConfig {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 0.1;
  std::size_t seeds = 3;
  std::size_t random_per_class = 0;  // 0: match the distilled set's m
  bool balanced_random = true;
  std::vector<std::size_t> sweep;
  std::size_t eval_batch = 256;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, "eval." + msg); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch < 1) fail("batch must be >= 1");
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be finite and > 0");
    if (seeds < 1) fail("seeds must be >= 1");
    if (eval_batch < 1) fail("eval_batch must be >= 1");
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      if (sweep[i] < 1 || (i > 0 && sweep[i] <= sweep[i - 1])) fail("sweep must be strictly ascending and >= 1");
    }
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch", batch},
            {"lr", lr},
            {"seeds", seeds},
            {"random_per_class", random_per_class},
            {"balanced_random", balanced_random},
            {"sweep", sweep},
            {"eval_batch", eval_batch}};
  }

  static EvalConfig from_json(const nlohmann::json& j) {
    json_util::reject_unknown_keys(
        j, {"epochs", "batch", "lr", "seeds", "random_per_class", "balanced_random", "sweep", "eval_batch"}, "eval");
    EvalConfig c;
    const char* s = "eval";
    json_util::read(j, "epochs", c.epochs, s);
    json_util::read(j, "batch", c.batch, s);
    json_util::read(j, "lr", c.lr, s);
    json_util::read(j, "seeds", c.seeds, s);
    json_util::read(j, "random_per_class", c.random_per_class, s);
    json_util::read(j, "balanced_random", c.balanced_random, s);
    json_util::read(j, "sweep", c.sweep, s);
    json_util::read(j, "eval_batch", c.eval_batch, s);
    return c;
  }

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct TrainSpec {
  std::string source;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 0.1;
  std::uint64_t seed = 0;

  /// Everything except the data source and seed; equal across compared runs.
  nlohmann::json procedure() const { return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"optimizer", "sgd"}}; }

  nlohmann::json to_json() const {
    auto j = procedure();
    j["source"] = source;
    j["seed"] = seed;
    return j;
  }
};

struct EvalReport {
  std::string source;
  std::uint64_t seed = 0;
  double final_accuracy = 0;
  std::vector<double> epoch_accuracy;
  double wall_seconds = 0;
  nlohmann::json spec;
  std::uint64_t model_hash = 0;
  std::uint64_t procedure_hash = 0;

  /// Wall time is excluded; everything else is deterministic.
  friend bool operator==(const EvalReport& a, const EvalReport& b) {
    return a.source == b.source && a.seed == b.seed && a.final_accuracy == b.final_accuracy &&
           a.epoch_accuracy == b.epoch_accuracy && a.spec == b.spec && a.model_hash == b.model_hash &&
           a.procedure_hash == b.procedure_hash;
  }
};

/// Either embedded real examples or distilled matrices.
template <class T = float>
struct TrainingSource {
  const Dataset* real = nullptr;
  const EmbeddingTable* table = nullptr;
  const DistilledSet<T>* distilled = nullptr;

  static TrainingSource from_real(const Dataset& ds, const EmbeddingTable& table) { return {&ds, &table, nullptr}; }
  static TrainingSource from_distilled(const DistilledSet<T>& d) { return {nullptr, nullptr, &d}; }

  std::size_t size() const { return distilled ? distilled->size() : (real ? real->size() : 0); }
};

template <class T>
struct TrainResult {
  ModelParams<T> params;
  EvalReport report;
};

namespace detail {
inline constexpr std::uint64_t kEvalOrderStream = 21;
inline constexpr std::uint64_t kSubsetStream = 22;
}  // namespace detail

/// Fresh init_params(seed), then plain SGD with per-epoch reshuffling; test
/// accuracy is recorded after every epoch.
template <class T, class Model>
  requires Classifier<Model, T>
TrainResult<T> train_model(const Model& model, const TrainingSource<T>& source, const TrainSpec& spec,
                           const Dataset& test, const EmbeddingTable& table, std::size_t eval_batch = 256) {
  if (source.size() == 0) throw Error(Errc::EmptySource, "training source '" + spec.source + "' is empty");
  if (spec.epochs < 1 || spec.batch < 1 || !(spec.lr > 0)) throw Error(Errc::InvalidConfig, "invalid train spec");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = source.size();
  auto params = model.template init_params<T>(spec.seed).detach(true);
  EvalReport report;
  report.source = spec.source;
  report.seed = spec.seed;
  report.spec = spec.to_json();
  report.procedure_hash = Fnv1a().update(spec.procedure().dump()).digest();
  if constexpr (requires { model.config().hash(); }) report.model_hash = model.config().hash();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(spec.seed, detail::kEvalOrderStream, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < n; b += spec.batch) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + spec.batch)));
      Tensor<T> x;
      std::vector<std::size_t> y;
      if (source.distilled) {
        x = index_select0(source.distilled->samples, idx);
        for (auto i : idx) y.push_back(source.distilled->labels[i]);
      } else {
        x = embed_examples<T>(*source.real, idx, *source.table);
        for (auto i : idx) y.push_back(source.real->examples[i].label);
      }
      auto grads = backward(model_loss(model, params, x, y), params.tensors);
      NoGradGuard no_grad;
      params = sgd_update(params, grads, spec.lr).detach(true);
    }
    report.epoch_accuracy.push_back(accuracy(model, params, test, table, eval_batch));
  }
  report.final_accuracy = report.epoch_accuracy.back();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {params.detach(), std::move(report)};
}

/// Uniform sampling without replacement. Balanced: exactly m per class.
/// Unbalanced: m * C examples from the whole set.
inline Dataset random_subset(const Dataset& ds, std::size_t per_class, std::uint64_t seed, bool balanced = true) {
  std::mt19937_64 rng(seed);
  Dataset out{{}, ds.num_classes, ds.max_len};
  std::vector<std::size_t> picked;
  if (balanced) {
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.examples[i].label].push_back(i);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      if (by_class[c].size() < per_class) {
        throw Error(Errc::ClassTooSmall, "class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                                             " examples, need " + std::to_string(per_class));
      }
      std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
      picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    std::shuffle(picked.begin(), picked.end(), rng);
  } else {
    const std::size_t want = per_class * ds.num_classes;
    if (ds.size() < want) throw Error(Errc::ClassTooSmall, "dataset smaller than the requested subset");
    picked.resize(ds.size());
    std::iota(picked.begin(), picked.end(), std::size_t{0});
    std::shuffle(picked.begin(), picked.end(), rng);
    picked.resize(want);
  }
  for (auto i : picked) out.examples.push_back(ds.examples[i]);
  return out;
}

struct ComparisonRow {
  std::string source;
  std::uint64_t seed = 0;
  double accuracy = 0;
  std::optional<double> relative_pct;  // against the same seed's full-data accuracy
};

struct SourceSummary {
  std::string source;
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 for a single seed
  std::optional<double> relative_pct;
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  std::vector<EvalReport> reports;

  std::vector<SourceSummary> summary() const {
    std::vector<SourceSummary> out;
    for (const char* name : {"full", "random", "distilled"}) {
      std::vector<double> acc;
      for (const auto& r : rows)
        if (r.source == name) acc.push_back(r.accuracy);
      if (acc.empty()) continue;
      SourceSummary s{name};
      s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
      if (acc.size() > 1) {
        double ss = 0;
        for (double a : acc) ss += (a - s.mean) * (a - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(acc.size() - 1));
      }
      out.push_back(s);
    }
    if (!out.empty() && out.front().source == "full" && out.front().mean > 0) {
      for (auto& s : out) s.relative_pct = 100.0 * s.mean / out.front().mean;
    }
    return out;
  }
};

inline std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t k) {
  std::vector<std::uint64_t> out(k);
  std::iota(out.begin(), out.end(), base);
  return out;
}

/// Trains full, random and distilled sources for each seed. `distilled` holds
/// either one set shared by all seeds or one set per seed.
template <class T, class Model>
  requires Classifier<Model, T>
Comparison compare_protocol(const Model& model, const Dataset& train, const Dataset& test, const EmbeddingTable& table,
                            const std::vector<DistilledSet<T>>& distilled, const EvalConfig& cfg,
                            std::uint64_t base_seed) {
  cfg.validate();
  if (distilled.empty() || (distilled.size() != 1 && distilled.size() != cfg.seeds)) {
    throw Error(Errc::InvalidConfig, "need one distilled set or one per seed");
  }
  const std::size_t m = cfg.random_per_class ? cfg.random_per_class : distilled.front().per_class;
  const auto seeds = seed_list(base_seed, cfg.seeds);
  Comparison out;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const std::uint64_t seed = seeds[k];
    auto spec = [&](const char* name) { return TrainSpec{name, cfg.epochs, cfg.batch, cfg.lr, seed}; };
    const auto subset = random_subset(train, m, derive_seed(seed, detail::kSubsetStream), cfg.balanced_random);
    const auto& dset = distilled[distilled.size() == 1 ? 0 : k];
    auto full = train_model(model, TrainingSource<T>::from_real(train, table), spec("full"), test, table, cfg.eval_batch);
    auto rand = train_model(model, TrainingSource<T>::from_real(subset, table), spec("random"), test, table, cfg.eval_batch);
    auto dist = train_model(model, TrainingSource<T>::from_distilled(dset), spec("distilled"), test, table, cfg.eval_batch);
    const double base = full.report.final_accuracy;
    for (auto* r : {&full.report, &rand.report, &dist.report}) {
      ComparisonRow row{r->source, seed, r->final_accuracy, std::nullopt};
      if (base > 0) row.relative_pct = 100.0 * r->final_accuracy / base;
      out.rows.push_back(row);
      out.reports.push_back(*r);
    }
  }
  return out;
}

struct CurveRow {
  std::string source;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;  // 1-based
  double accuracy = 0;
};

inline std::vector<CurveRow> epoch_curves(const std::vector<EvalReport>& reports) {
  std::vector<CurveRow> out;
  for (const auto& r : reports) {
    for (std::size_t e = 0; e < r.epoch_accuracy.size(); ++e) out.push_back({r.source, r.seed, e + 1, r.epoch_accuracy[e]});
  }
  return out;
}

/// First epoch (1-based) whose accuracy reaches `fraction` of the final one.
inline std::size_t epochs_to_fraction(const std::vector<double>& curve, double fraction) {
  if (curve.empty()) return 0;
  const double target = fraction * curve.back();
  for (std::size_t e = 0; e < curve.size(); ++e) {
    if (curve[e] >= target) return e + 1;
  }
  return curve.size();
}

struct SweepRow {
  std::size_t m = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
};

/// Distills and evaluates one set per (m, seed). `distill` maps (m, seed) to a
/// distilled set so callers can reuse artifacts they already have.
template <class T, class Model>
  requires Classifier<Model, T>
std::vector<SweepRow> size_sweep(const Model& model, const Dataset& test, const EmbeddingTable& table,
                                 const std::vector<std::size_t>& m_values, const EvalConfig& cfg,
                                 std::uint64_t base_seed,
                                 const std::function<DistilledSet<T>(std::size_t, std::uint64_t)>& distill) {
  cfg.validate();
  for (std::size_t i = 0; i < m_values.size(); ++i) {
    if (m_values[i] < 1 || (i > 0 && m_values[i] <= m_values[i - 1])) {
      throw Error(Errc::InvalidConfig, "sweep m values must be strictly ascending and >= 1");
    }
  }
  std::vector<SweepRow> out;
  for (auto m : m_values) {
    for (auto seed : seed_list(base_seed, cfg.seeds)) {
      const auto d = distill(m, seed);
      TrainSpec spec{"distilled", cfg.epochs, cfg.batch, cfg.lr, seed};
      auto r = train_model(model, TrainingSource<T>::from_distilled(d), spec, test, table, cfg.eval_batch);
      out.push_back({m, seed, r.report.final_accuracy});
    }
  }
  return out;
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when either
/// side has no variance.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(Errc::ShapeMismatch, "spearman needs paired samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace detail

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "source,seed,accuracy,relative_pct\n";
  for (const auto& r : rows) {
    out += r.source + "," + std::to_string(r.seed) + "," + detail::fmt(r.accuracy) + "," +
           (r.relative_pct ? detail::fmt(*r.relative_pct) : std::string()) + "\n";
  }
  return out;
}

inline std::string curves_csv(const std::vector<CurveRow>& rows) {
  std::string out = "source,seed,epoch,accuracy\n";
  for (const auto& r : rows) {
    out += r.source + "," + std::to_string(r.seed) + "," + std::to_string(r.epoch) + "," + detail::fmt(r.accuracy) + "\n";
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "m,seed,accuracy\n";
  for (const auto& r : rows) out += std::to_string(r.m) + "," + std::to_string(r.seed) + "," + detail::fmt(r.accuracy) + "\n";
  return out;
}

}  // namespace textdistill

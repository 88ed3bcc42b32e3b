// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: one JSON file with strict keys. Relative paths resolve
// against the directory holding the config file.
//
// {
//   "seed": 0,                         run seed; also the distillation seed
//   "out": "runs/a",                   output directory
//   "data": {"train": "...", "test": "...", "num_classes": 0, "max_len": 40,
//            "field": null, "min_count": 1},
//   "synthetic": {...},                used when "data" has no paths
//   "embeddings": {"path": null, "dim": 16, "sigma": 0.4, "seed": 1},
//   "model": {"widths": [1], "channels": 16},
//   "distill": {...}, "eval": {...}
// }
//
// model.dim/max_len/num_classes and distill.max_len/dim are derived from the
// data and embeddings; stating them with a different value is an error.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/distill.hpp"
#include "textdistill/eval.hpp"
#include "textdistill/json_util.hpp"
#include "textdistill/model.hpp"
#include "textdistill/synthetic.hpp"
#include "textdistill/textdata.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

struct DataConfig {
  std::filesystem::path train;
  std::filesystem::path test;
  std::size_t num_classes = 0;  // 0: infer from the training labels
  std::size_t max_len = 40;
  std::optional<std::size_t> field;
  std::size_t min_count = 1;

  bool uses_files() const { return !train.empty(); }
};

struct EmbeddingConfig {
  std::filesystem::path path;  // empty: random N(0, sigma^2) vectors
  std::size_t dim = 16;
  double sigma = 0.4;
  std::uint64_t seed = 1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  DataConfig data;
  SyntheticConfig synthetic;
  EmbeddingConfig embeddings;
  ModelConfig model;
  DistillConfig distill;
  EvalConfig eval;

  /// Fills derived fields from data and embedding settings, then validates.
  void resolve(std::size_t num_classes) {
    model.dim = embeddings.dim;
    model.max_len = data.max_len;
    model.num_classes = num_classes;
    distill.dim = embeddings.dim;
    distill.max_len = data.max_len;
    distill.seed = seed;
    model.validate();
    distill.validate();
    eval.validate();
  }

  /// Paths must exist; numeric fields must be in range.
  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, msg); };
    if (data.uses_files()) {
      if (data.test.empty()) fail("data.test is required with data.train");
      for (const auto& p : {data.train, data.test}) {
        if (!std::filesystem::exists(p)) fail("missing file " + p.string());
      }
    } else {
      synthetic.validate();
    }
    if (!embeddings.path.empty() && !std::filesystem::exists(embeddings.path)) {
      fail("missing file " + embeddings.path.string());
    }
    if (data.max_len < 1) fail("data.max_len must be >= 1");
    if (embeddings.dim < 1) fail("embeddings.dim must be >= 1");
    if (!(embeddings.sigma > 0)) fail("embeddings.sigma must be > 0");
    if (data.field && *data.field < 1) fail("data.field is 1-based");
    distill.validate();
    eval.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json d = {{"train", data.train.string()}, {"test", data.test.string()},
                        {"num_classes", data.num_classes}, {"max_len", data.max_len},
                        {"min_count", data.min_count}};
    d["field"] = data.field ? nlohmann::json(*data.field) : nlohmann::json(nullptr);
    nlohmann::json e = {{"dim", embeddings.dim}, {"sigma", embeddings.sigma}, {"seed", embeddings.seed}};
    e["path"] = embeddings.path.empty() ? nlohmann::json(nullptr) : nlohmann::json(embeddings.path.string());
    auto m = model.to_json();
    auto dist = distill.to_json();
    return {{"seed", seed},  {"out", out.string()}, {"data", d},         {"synthetic", synthetic.to_json()},
            {"embeddings", e}, {"model", m},        {"distill", dist}, {"eval", eval.to_json()}};
  }

  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    using json_util::read;
    json_util::reject_unknown_keys(j, {"seed", "out", "data", "synthetic", "embeddings", "model", "distill", "eval"},
                                   "config");
    RunConfig c;
    read(j, "seed", c.seed, "config");
    std::string out_dir = c.out.string();
    read(j, "out", out_dir, "config");
    c.out = resolve_path(out_dir, base_dir);

    if (auto it = j.find("data"); it != j.end()) {
      json_util::reject_unknown_keys(*it, {"train", "test", "num_classes", "max_len", "field", "min_count"}, "data");
      std::string train, test;
      read(*it, "train", train, "data");
      read(*it, "test", test, "data");
      if (!train.empty()) c.data.train = resolve_path(train, base_dir);
      if (!test.empty()) c.data.test = resolve_path(test, base_dir);
      read(*it, "num_classes", c.data.num_classes, "data");
      read(*it, "max_len", c.data.max_len, "data");
      read(*it, "min_count", c.data.min_count, "data");
      if (auto f = it->find("field"); f != it->end() && !f->is_null()) {
        std::size_t field = 0;
        read(*it, "field", field, "data");
        c.data.field = field;
      }
    }
    if (auto it = j.find("synthetic"); it != j.end()) c.synthetic = SyntheticConfig::from_json(*it);
    if (auto it = j.find("embeddings"); it != j.end()) {
      json_util::reject_unknown_keys(*it, {"path", "dim", "sigma", "seed"}, "embeddings");
      if (auto p = it->find("path"); p != it->end() && !p->is_null()) {
        std::string path;
        read(*it, "path", path, "embeddings");
        c.embeddings.path = resolve_path(path, base_dir);
      }
      read(*it, "dim", c.embeddings.dim, "embeddings");
      read(*it, "sigma", c.embeddings.sigma, "embeddings");
      read(*it, "seed", c.embeddings.seed, "embeddings");
    }
    if (auto it = j.find("model"); it != j.end()) {
      c.model = ModelConfig::from_json(*it);
      require_derived(*it, "dim", c.embeddings.dim, "model");
      require_derived(*it, "max_len", c.data.max_len, "model");
    }
    if (auto it = j.find("distill"); it != j.end()) {
      c.distill = DistillConfig::from_json(*it);
      require_derived(*it, "dim", c.embeddings.dim, "distill");
      require_derived(*it, "max_len", c.data.max_len, "distill");
      if (auto s = it->find("seed"); s != it->end() && (!s->is_number_integer() || s->get<std::uint64_t>() != c.seed)) {
        throw Error(Errc::InvalidConfig, "distill.seed is set by the top-level seed");
      }
    }
    if (auto it = j.find("eval"); it != j.end()) c.eval = EvalConfig::from_json(*it);
    c.model.dim = c.distill.dim = c.embeddings.dim;
    c.model.max_len = c.distill.max_len = c.data.max_len;
    c.distill.seed = c.seed;
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::InvalidConfig, "config " + path.string() + ": " + e.what());
    } catch (const Error& e) {
      throw Error(Errc::InvalidConfig, e.what());
    }
    return from_json(j, path.parent_path());
  }

 private:
  static std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
  }

  static void require_derived(const nlohmann::json& j, const char* key, std::size_t expected, const char* section) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer() || it->get<std::int64_t>() != static_cast<std::int64_t>(expected)) {
      throw Error(Errc::InvalidConfig, std::string(section) + "." + key + " must match " + std::to_string(expected));
    }
  }
};

/// Loaded corpus, vocabulary and embeddings for a run.
struct RunData {
  Vocab vocab;
  Dataset train;
  Dataset test;
  EmbeddingTable table;
  std::vector<std::filesystem::path> inputs;
};

inline RunData load_run_data(const RunConfig& cfg) {
  RunData d;
  RawCorpus train_raw, test_raw;
  if (cfg.data.uses_files()) {
    FieldPolicy policy{cfg.data.field};
    train_raw = load_csv_dataset(cfg.data.train, cfg.data.num_classes, policy);
    test_raw = load_csv_dataset(cfg.data.test, train_raw.num_classes, policy);
    d.inputs = {cfg.data.train, cfg.data.test};
  } else {
    auto corpus = generate_synthetic(cfg.synthetic);
    train_raw = std::move(corpus.train);
    test_raw = std::move(corpus.test);
  }
  std::vector<std::vector<std::string>> docs;
  docs.reserve(train_raw.rows.size());
  for (const auto& row : train_raw.rows) docs.push_back(tokenize(row.text));
  d.vocab = build_vocab(docs, cfg.data.min_count);
  d.train = make_dataset(train_raw, d.vocab, cfg.data.max_len);
  d.test = make_dataset(test_raw, d.vocab, cfg.data.max_len);
  if (cfg.embeddings.path.empty()) {
    d.table = random_embeddings(d.vocab, cfg.embeddings.dim, cfg.embeddings.sigma, cfg.embeddings.seed);
  } else {
    d.table = load_embeddings(cfg.embeddings.path, d.vocab, cfg.embeddings.dim, cfg.embeddings.seed);
    d.inputs.push_back(cfg.embeddings.path);
  }
  return d;
}

}  // namespace textdistill

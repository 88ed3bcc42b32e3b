// SPDX-License-Identifier: Apache-2.0
#pragma once

// Keyword corpus for desk-scale runs. Each class owns a few signature tokens;
// documents are background noise with signature tokens mixed in.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "textdistill/json_util.hpp"
#include "textdistill/textdata.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

struct SyntheticConfig {
  std::size_t num_classes = 4;
  std::size_t train_size = 2000;
  std::size_t test_size = 400;
  std::size_t signature_tokens = 5;
  std::size_t background_vocab = 500;
  std::size_t min_len = 20;
  std::size_t max_len = 40;
  double signature_rate = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(Errc::InvalidConfig, "synthetic." + msg); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (train_size < 1) fail("train_size must be >= 1");
    if (signature_tokens < 1 || background_vocab < 1) fail("token counts must be >= 1");
    if (min_len < 1 || max_len < min_len) fail("need 1 <= min_len <= max_len");
    if (!(signature_rate >= 0 && signature_rate <= 1)) fail("signature_rate must be in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"num_classes", num_classes}, {"train_size", train_size},         {"test_size", test_size},
            {"signature_tokens", signature_tokens}, {"background_vocab", background_vocab}, {"min_len", min_len},
            {"max_len", max_len},         {"signature_rate", signature_rate}, {"seed", seed}};
  }

  static SyntheticConfig from_json(const nlohmann::json& j) {
    json_util::reject_unknown_keys(j,
                                   {"num_classes", "train_size", "test_size", "signature_tokens", "background_vocab",
                                    "min_len", "max_len", "signature_rate", "seed"},
                                   "synthetic");
    SyntheticConfig c;
    const char* s = "synthetic";
    json_util::read(j, "num_classes", c.num_classes, s);
    json_util::read(j, "train_size", c.train_size, s);
    json_util::read(j, "test_size", c.test_size, s);
    json_util::read(j, "signature_tokens", c.signature_tokens, s);
    json_util::read(j, "background_vocab", c.background_vocab, s);
    json_util::read(j, "min_len", c.min_len, s);
    json_util::read(j, "max_len", c.max_len, s);
    json_util::read(j, "signature_rate", c.signature_rate, s);
    json_util::read(j, "seed", c.seed, s);
    return c;
  }

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

struct SyntheticCorpus {
  RawCorpus train;
  RawCorpus test;
};

inline std::string signature_token(std::size_t cls, std::size_t k) {
  return "sig" + std::to_string(cls) + "x" + std::to_string(k);
}

inline std::string background_token(std::size_t k) { return "w" + std::to_string(k); }

/// Class-balanced documents (label i mod C, then shuffled). Each position is a
/// signature token of the document's class with probability signature_rate,
/// otherwise a uniform background token.
inline SyntheticCorpus generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> length(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<std::size_t> background(0, cfg.background_vocab - 1);
  std::uniform_int_distribution<std::size_t> signature(0, cfg.signature_tokens - 1);
  std::bernoulli_distribution use_signature(cfg.signature_rate);
  auto make = [&](std::size_t n) {
    RawCorpus corpus{{}, cfg.num_classes};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t cls = i % cfg.num_classes;
      const std::size_t len = length(rng);
      std::string text;
      for (std::size_t t = 0; t < len; ++t) {
        if (t) text += ' ';
        text += use_signature(rng) ? signature_token(cls, signature(rng)) : background_token(background(rng));
      }
      corpus.rows.push_back({cls, std::move(text)});
    }
    std::shuffle(corpus.rows.begin(), corpus.rows.end(), rng);
    return corpus;
  };
  SyntheticCorpus out;
  out.train = make(cfg.train_size);
  out.test = make(cfg.test_size);
  return out;
}

/// Two quoted columns: 1-based class index and text.
inline std::string to_csv(const RawCorpus& corpus) {
  std::string out;
  for (const auto& row : corpus.rows) {
    out += '"' + std::to_string(row.label + 1) + "\",\"";
    for (char c : row.text) {
      if (c == '"') out += '"';
      out += c;
    }
    out += "\"\n";
  }
  return out;
}

}  // namespace textdistill

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Corpus ingestion: benchmark-layout CSV files, tokenization, vocabularies,
// pretrained embedding tables and fixed-length embedded batches.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "textdistill/tensor.hpp"
#include "textdistill/util.hpp"

namespace textdistill {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercases ASCII, splits on whitespace and emits each ASCII punctuation
/// character as its own token. Non-ASCII bytes stay inside their token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return tokens;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvRow {
  std::size_t line;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

/// RFC 4180 style reader: comma separated, optional double quotes, doubled
/// quotes as escapes, newlines allowed inside quoted fields.
inline std::vector<CsvRow> parse_csv(std::string_view data) {
  std::vector<CsvRow> rows;
  std::size_t line = 1, i = 0;
  const std::size_t n = data.size();
  while (i < n) {
    if (data[i] == '\n' || data[i] == '\r') {
      if (data[i] == '\n') ++line;
      ++i;
      continue;
    }
    CsvRow row{line, {}};
    std::string field;
    bool in_quotes = false, quoted = false;
    for (; i <= n; ++i) {
      const char ch = i < n ? data[i] : '\n';
      if (in_quotes) {
        if (i == n) throw LineError(Errc::MalformedRow, row.line, "unterminated quoted field");
        if (ch == '"') {
          if (i + 1 < n && data[i + 1] == '"') {
            field.push_back('"');
            ++i;
          } else {
            in_quotes = false;
          }
        } else {
          if (ch == '\n') ++line;
          field.push_back(ch);
        }
        continue;
      }
      if (ch == '"') {
        if (quoted || !field.empty()) throw LineError(Errc::MalformedRow, row.line, "stray quote");
        in_quotes = quoted = true;
      } else if (ch == ',') {
        row.fields.push_back(std::move(field));
        field.clear();
        quoted = false;
      } else if (ch == '\n' || ch == '\r') {
        row.fields.push_back(std::move(field));
        if (ch == '\r' && i + 1 < n && data[i + 1] == '\n') ++i;
        if (i < n) {
          ++line;
          ++i;
        }
        break;
      } else {
        if (quoted) throw LineError(Errc::MalformedRow, row.line, "text after closing quote");
        field.push_back(ch);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct LabeledText {
  std::size_t label;  // 0-based
  std::string text;
};

/// Which text columns make up a document.
struct FieldPolicy {
  std::optional<std::size_t> only_field;  // 1-based index among text fields; unset joins all
};

struct RawCorpus {
  std::vector<LabeledText> rows;
  std::size_t num_classes = 0;
};

/// Parses the released-benchmark layout: a 1-based class index followed by one
/// or more text fields. `num_classes` of 0 infers C from the largest label.
inline RawCorpus parse_labeled_csv(std::string_view data, std::size_t num_classes = 0, FieldPolicy policy = {}) {
  RawCorpus corpus;
  std::size_t max_label = 0;
  for (auto& row : parse_csv(data)) {
    if (row.fields.size() < 2) throw LineError(Errc::MalformedRow, row.line, "need a label and a text field");
    const std::string& lab = row.fields[0];
    long long value = 0;
    auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), value);
    if (ec != std::errc{} || ptr != lab.data() + lab.size()) {
      throw LineError(Errc::MalformedRow, row.line, "label '" + lab + "' is not an integer");
    }
    if (value < 1 || (num_classes && static_cast<std::size_t>(value) > num_classes)) {
      throw LineError(Errc::LabelOutOfDeclaredRange, row.line, "label " + lab);
    }
    std::string text;
    if (policy.only_field) {
      const std::size_t f = *policy.only_field;
      if (f < 1 || f >= row.fields.size()) throw LineError(Errc::MalformedRow, row.line, "missing text field");
      text = row.fields[f];
    } else {
      for (std::size_t f = 1; f < row.fields.size(); ++f) {
        if (f > 1) text.push_back(' ');
        text += row.fields[f];
      }
    }
    max_label = std::max(max_label, static_cast<std::size_t>(value));
    corpus.rows.push_back({static_cast<std::size_t>(value - 1), std::move(text)});
  }
  corpus.num_classes = num_classes ? num_classes : max_label;
  return corpus;
}

inline RawCorpus load_csv_dataset(const std::filesystem::path& path, std::size_t num_classes = 0,
                                  FieldPolicy policy = {}) {
  return parse_labeled_csv(read_file(path), num_classes, policy);
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;

  Vocab() : tokens_{"<pad>", "<unk>"} {}

  /// Tokens with frequency >= min_count, ordered by (frequency desc, token asc).
  static Vocab build(const std::vector<std::vector<std::string>>& docs, std::size_t min_count = 1) {
    if (min_count < 1) throw Error(Errc::InvalidConfig, "min_count must be >= 1");
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& doc : docs)
      for (const auto& tok : doc) ++freq[tok];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, count] : freq)
      if (count >= min_count) kept.emplace_back(tok, count);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocab v;
    for (auto& [tok, count] : kept) v.add(tok);
    return v;
  }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& token) {
    ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

inline Vocab build_vocab(const std::vector<std::vector<std::string>>& docs, std::size_t min_count = 1) {
  return Vocab::build(docs, min_count);
}

/// Token ids truncated to `len` and right-padded with PAD.
inline std::vector<TokenId> encode(const std::vector<std::string>& tokens, const Vocab& vocab, std::size_t len) {
  if (len < 1) throw Error(Errc::InvalidConfig, "fixed length must be >= 1");
  std::vector<TokenId> ids(len, Vocab::kPad);
  for (std::size_t i = 0; i < std::min(len, tokens.size()); ++i) ids[i] = vocab.id(tokens[i]);
  return ids;
}

// ---------------------------------------------------------------------------
// Embeddings

/// V x d table with row 0 (PAD) pinned to zero. Stats cover every non-PAD entry.
struct EmbeddingTable {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;
  double mean = 0;
  double stddev = 0;

  std::span<const float> row(std::size_t id) const { return {data.data() + id * dim, dim}; }

  void refresh_stats() {
    double s = 0, s2 = 0;
    const std::size_t n = (rows > 0 ? rows - 1 : 0) * dim;
    for (std::size_t i = dim; i < data.size(); ++i) {
      s += data[i];
      s2 += static_cast<double>(data[i]) * data[i];
    }
    mean = n ? s / static_cast<double>(n) : 0.0;
    stddev = n ? std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - mean * mean)) : 0.0;
  }

  /// Content hash over the dimensions and raw float bytes.
  std::uint64_t hash() const {
    Fnv1a h;
    const std::uint64_t r = rows, d = dim;
    h.update_value(r).update_value(d);
    h.update(data.data(), data.size() * sizeof(float));
    return h.digest();
  }
};

namespace detail {

inline void fill_normal(std::span<float> out, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& x : out) x = static_cast<float>(normal(rng));
}

}  // namespace detail

/// Table of i.i.d. Normal(0, sigma^2) rows; used when no pretrained file exists.
inline EmbeddingTable random_embeddings(const Vocab& vocab, std::size_t dim, double sigma, std::uint64_t seed) {
  EmbeddingTable t{vocab.size(), dim, std::vector<float>(vocab.size() * dim, 0.0f)};
  std::mt19937_64 rng(seed);
  detail::fill_normal(std::span<float>(t.data).subspan(dim), sigma, rng);
  t.refresh_stats();
  return t;
}

/// Reads "token f1 ... fd" lines. In-vocabulary tokens take the file vector;
/// the rest are drawn from Normal(0, s^2) where s is the standard deviation of
/// every value in the file. PAD is forced to zero.
inline EmbeddingTable parse_embeddings(std::string_view text, const Vocab& vocab, std::size_t dim,
                                       std::uint64_t seed) {
  EmbeddingTable t{vocab.size(), dim, std::vector<float>(vocab.size() * dim, 0.0f)};
  std::vector<bool> filled(vocab.size(), false);
  double s = 0, s2 = 0;
  std::size_t count = 0, line_no = 0, pos = 0;
  std::vector<float> vec(dim);
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string_view::npos) throw LineError(Errc::DimMismatch, line_no, "no vector values");
    const std::string token(line.substr(0, sp));
    std::string_view rest = line.substr(sp + 1);
    std::size_t k = 0;
    while (!rest.empty()) {
      const std::size_t next = rest.find(' ');
      std::string_view field = rest.substr(0, next);
      if (k >= dim) throw LineError(Errc::DimMismatch, line_no, "more than " + std::to_string(dim) + " values");
      float v = 0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc{} || ptr != field.data() + field.size() || !std::isfinite(v)) {
        throw LineError(Errc::UnparseableFloat, line_no, "'" + std::string(field) + "'");
      }
      vec[k++] = v;
      rest = next == std::string_view::npos ? std::string_view{} : rest.substr(next + 1);
    }
    if (k != dim) {
      throw LineError(Errc::DimMismatch, line_no, "expected " + std::to_string(dim) + " values, got " +
                                                      std::to_string(k));
    }
    for (float v : vec) {
      s += v;
      s2 += static_cast<double>(v) * v;
    }
    count += dim;
    if (vocab.contains(token)) {
      const TokenId id = vocab.id(token);
      if (id != Vocab::kPad && !filled[id]) {
        std::copy(vec.begin(), vec.end(), t.data.begin() + id * dim);
        filled[id] = true;
      }
    }
  }
  if (count == 0) throw Error(Errc::DimMismatch, "embedding file holds no vectors");
  const double m = s / static_cast<double>(count);
  const double sigma = std::sqrt(std::max(0.0, s2 / static_cast<double>(count) - m * m));
  std::mt19937_64 rng(seed);
  for (std::size_t id = 1; id < vocab.size(); ++id) {
    if (!filled[id]) detail::fill_normal(std::span<float>(t.data).subspan(id * dim, dim), sigma, rng);
  }
  std::fill_n(t.data.begin(), dim, 0.0f);
  t.refresh_stats();
  return t;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocab& vocab, std::size_t dim,
                                      std::uint64_t seed) {
  return parse_embeddings(read_file(path), vocab, dim, seed);
}

// ---------------------------------------------------------------------------
// Datasets and batches

struct Example {
  std::vector<TokenId> ids;  // fixed length
  std::size_t label;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t num_classes = 0;
  std::size_t max_len = 0;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& e : examples) ++counts[e.label];
    return counts;
  }
};

inline Dataset make_dataset(const RawCorpus& corpus, const Vocab& vocab, std::size_t max_len) {
  Dataset ds{{}, corpus.num_classes, max_len};
  ds.examples.reserve(corpus.rows.size());
  for (const auto& row : corpus.rows) ds.examples.push_back({encode(tokenize(row.text), vocab, max_len), row.label});
  return ds;
}

/// Gathers table rows for a [B x L] id block into a [B x L x d] tensor. The
/// result is a constant: no gradient ever reaches the table.
template <class T>
Tensor<T> embed_batch(std::span<const TokenId> ids, std::size_t batch, std::size_t len, const EmbeddingTable& table) {
  if (ids.size() != batch * len) throw Error(Errc::ShapeMismatch, "embed_batch: id block size");
  const std::size_t d = table.dim;
  std::vector<T> out(ids.size() * d);
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (ids[p] >= table.rows) {
      throw Error(Errc::IdOutOfRange, "token id " + std::to_string(ids[p]) + " with " +
                                          std::to_string(table.rows) + " rows");
    }
    const auto row = table.row(ids[p]);
    std::copy(row.begin(), row.end(), out.begin() + p * d);
  }
  return Tensor<T>(Shape{batch, len, d}, std::move(out));
}

/// Embeds the selected examples of `ds`.
template <class T>
Tensor<T> embed_examples(const Dataset& ds, std::span<const std::size_t> indices, const EmbeddingTable& table) {
  std::vector<TokenId> ids;
  ids.reserve(indices.size() * ds.max_len);
  for (auto i : indices) ids.insert(ids.end(), ds.examples[i].ids.begin(), ds.examples[i].ids.end());
  return embed_batch<T>(ids, indices.size(), ds.max_len, table);
}

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
};

/// Shuffled minibatches; epoch e uses the permutation seeded by seed + e. The
/// final partial batch of an epoch is emitted as-is, then the next epoch starts.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed)
      : ds_(&ds), batch_size_(batch_size), seed_(seed) {
    if (ds.empty()) throw Error(Errc::EmptyDataset, "batch iterator over an empty dataset");
    if (batch_size == 0) throw Error(Errc::InvalidConfig, "batch size must be positive");
    reshuffle();
  }

  Batch next() {
    if (cursor_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    Batch b;
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                     order_.begin() + static_cast<std::ptrdiff_t>(end));
    for (auto i : b.indices) b.labels.push_back(ds_->examples[i].label);
    cursor_ = end;
    return b;
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

 private:
  void reshuffle() {
    order_.resize(ds_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(seed_ + epoch_);
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
  }

  const Dataset* ds_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace textdistill

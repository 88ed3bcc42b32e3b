// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared test fixtures: tiny datasets, a linear classifier with a closed-form
// one-step meta-gradient, and small distillation instances for the FD oracle.

#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "textdistill/distill.hpp"

namespace textdistill::testing {

inline EmbeddingTable gaussian_table(std::size_t rows, std::size_t dim, double sigma, std::uint64_t seed) {
  EmbeddingTable t{rows, dim, std::vector<float>(rows * dim, 0.0f)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0, sigma);
  for (std::size_t i = dim; i < t.data.size(); ++i) t.data[i] = static_cast<float>(normal(rng));
  t.refresh_stats();
  return t;
}

/// Uniform non-PAD token ids, labels cycling over classes.
inline Dataset random_dataset(std::size_t n, std::size_t len, std::size_t vocab, std::size_t classes,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset ds{{}, classes, len};
  for (std::size_t i = 0; i < n; ++i) {
    Example e{std::vector<TokenId>(len), i % classes};
    for (auto& id : e.ids) id = static_cast<TokenId>(1 + rng() % (vocab - 1));
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

/// Multinomial logistic regression on the flattened L x d matrix.
struct LinearModel {
  std::size_t len = 2;
  std::size_t dim = 2;
  std::size_t classes = 2;

  std::size_t num_classes() const { return classes; }

  template <class T>
  ModelParams<T> init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    std::vector<T> w(len * dim * classes), b(classes);
    for (auto& v : w) v = static_cast<T>(dist(rng));
    for (auto& v : b) v = static_cast<T>(dist(rng));
    return {{"weight", "bias"}, {Tensor<T>({len * dim, classes}, w), Tensor<T>({classes}, b)}};
  }

  template <class T>
  Tensor<T> forward(const ModelParams<T>& p, const Tensor<T>& x) const {
    return affine(reshape(x, {x.dim(0), len * dim}), p.tensors[0], p.tensors[1]);
  }
};

inline std::vector<double> softmax_vec(const std::vector<double>& z) {
  double top = z[0];
  for (double v : z) top = std::max(top, v);
  std::vector<double> s(z.size());
  double total = 0;
  for (std::size_t k = 0; k < z.size(); ++k) total += s[k] = std::exp(z[k] - top);
  for (auto& v : s) v /= total;
  return s;
}

/// Closed-form gradient of the outer loss after one full-batch SGD step of
/// logistic regression. With s_i = softmax(W0^T x_i + b0), S_i = diag(s_i) -
/// s_i s_i^T, and G_W, G_b the outer-loss gradients at (W1, b1):
///   dL/dx_i = -(a/M) [G_W (s_i - e_i) + W0 S_i (G_W^T x_i + G_b)].
inline std::vector<double> linear_one_step_meta_grad(const std::vector<double>& xs, const std::vector<std::size_t>& ys,
                                                     const std::vector<double>& w0, const std::vector<double>& b0,
                                                     const std::vector<double>& xr, const std::vector<std::size_t>& yr,
                                                     std::size_t D, std::size_t C, double alpha) {
  const std::size_t M = ys.size(), B = yr.size();
  auto logits = [&](const std::vector<double>& w, const std::vector<double>& b, const double* x) {
    std::vector<double> z(b);
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t k = 0; k < C; ++k) z[k] += x[j] * w[j * C + k];
    return z;
  };
  std::vector<std::vector<double>> s(M);
  std::vector<double> w1 = w0, b1 = b0;
  for (std::size_t i = 0; i < M; ++i) {
    s[i] = softmax_vec(logits(w0, b0, &xs[i * D]));
    for (std::size_t k = 0; k < C; ++k) {
      const double r = s[i][k] - (k == ys[i] ? 1.0 : 0.0);
      b1[k] -= alpha / static_cast<double>(M) * r;
      for (std::size_t j = 0; j < D; ++j) w1[j * C + k] -= alpha / static_cast<double>(M) * xs[i * D + j] * r;
    }
  }
  std::vector<double> gw(D * C, 0.0), gb(C, 0.0);
  for (std::size_t r = 0; r < B; ++r) {
    auto p = softmax_vec(logits(w1, b1, &xr[r * D]));
    for (std::size_t k = 0; k < C; ++k) {
      const double e = (p[k] - (k == yr[r] ? 1.0 : 0.0)) / static_cast<double>(B);
      gb[k] += e;
      for (std::size_t j = 0; j < D; ++j) gw[j * C + k] += xr[r * D + j] * e;
    }
  }
  std::vector<double> out(M * D, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    std::vector<double> v(gb);  // G_W^T x_i + G_b
    for (std::size_t k = 0; k < C; ++k)
      for (std::size_t j = 0; j < D; ++j) v[k] += gw[j * C + k] * xs[i * D + j];
    std::vector<double> sv(C, 0.0);  // S_i v
    double sdotv = 0;
    for (std::size_t k = 0; k < C; ++k) sdotv += s[i][k] * v[k];
    for (std::size_t k = 0; k < C; ++k) sv[k] = s[i][k] * (v[k] - sdotv);
    for (std::size_t j = 0; j < D; ++j) {
      double total = 0;
      for (std::size_t k = 0; k < C; ++k) {
        total += gw[j * C + k] * (s[i][k] - (k == ys[i] ? 1.0 : 0.0)) + w0[j * C + k] * sv[k];
      }
      out[i * D + j] = -alpha / static_cast<double>(M) * total;
    }
  }
  return out;
}

/// vocab 20, d 4, L 6, C 2, m 2, widths {2, 3} with 3 channels (80 parameters).
struct TinyInstance {
  TextCnn model{ModelConfig{4, {2, 3}, 3, 2, 6}};
  DistilledSet<double> dtilde;
  ModelParams<double> theta0;
  Tensor<double> real_x;
  std::vector<std::size_t> real_y;
  InnerSpec spec;
};

inline TinyInstance make_tiny(std::uint64_t seed) {
  TinyInstance t;
  std::mt19937_64 rng(seed);
  DistillConfig cfg;
  cfg.per_class = 1 + seed % 2;
  cfg.max_len = 6;
  cfg.dim = 4;
  t.dtilde = init_distilled<double>(cfg, 2, {0.0, 0.7}, derive_seed(seed, 11));
  t.theta0 = t.model.init_params<double>(derive_seed(seed, 12));
  const auto table = gaussian_table(20, 4, 0.7, derive_seed(seed, 13));
  const auto real = random_dataset(6, 6, 20, 2, derive_seed(seed, 14));
  std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
  t.real_x = embed_examples<double>(real, all, table);
  for (auto i : all) t.real_y.push_back(real.examples[i].label);
  const std::size_t M = t.dtilde.size();
  t.spec.lr = 0.3 + 0.1 * static_cast<double>(seed % 5);
  t.spec.epochs = 1 + seed % 3;
  t.spec.batch = (seed % 4 == 3 && M > 2) ? 2 : 0;
  if (t.spec.batch == 2) t.spec.epochs = 1;  // keep T1 <= 3
  t.spec.order_seed = derive_seed(seed, 15);
  return t;
}

/// Autodiff meta-gradient plus the smallest kink distance seen along the way.
inline std::pair<std::vector<double>, double> tiny_meta_grad(const TinyInstance& t) {
  Graph<double> graph;
  std::vector<double> g;
  {
    GraphScope<double> scope(graph);
    auto samples = t.dtilde.samples.detach(true);
    auto trained = inner_train(t.model, t.theta0, samples, t.dtilde.labels, t.spec, true);
    auto loss = outer_loss(t.model, trained, t.real_x, t.real_y);
    g = as_double(meta_gradient(loss, samples));
  }
  return {g, kink_margin(graph)};
}

}  // namespace textdistill::testing

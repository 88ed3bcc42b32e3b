// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference oracle used by the gradient test suites. It only
// evaluates functions forward, so it never shares a code path with backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "textdistill/autograd.hpp"

namespace textdistill::testing {

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

template <class T>
std::vector<double> as_double(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

/// d f / d inputs[which] by central differences; step 1e-4 scaled by |x|.
/// Perturbed copies keep their requires_grad flag so `f` may differentiate
/// internally (directional second-order checks).
template <class T>
std::vector<double> fd_gradient(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                                const std::vector<Tensor<T>>& inputs, std::size_t which, double step = 1e-4) {
  std::vector<double> out(inputs[which].numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto values = inputs[which].to_vector();
    const T x = values[i];
    const double h = step * std::max(1.0, std::abs(static_cast<double>(x)));
    auto args = inputs;
    values[i] = static_cast<T>(x + h);
    args[which] = Tensor<T>(inputs[which].shape(), values, inputs[which].requires_grad());
    const double up = f(args).item();
    values[i] = static_cast<T>(x - h);
    args[which] = Tensor<T>(inputs[which].shape(), values, inputs[which].requires_grad());
    const double down = f(args).item();
    out[i] = (up - down) / (2 * h);
  }
  return out;
}

/// Largest relative mismatch between reverse-mode and finite-difference
/// gradients over all inputs that require grad.
template <class T>
double max_grad_error(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                      const std::vector<Tensor<T>>& inputs, double step = 1e-4) {
  std::vector<Tensor<T>> wrt;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].requires_grad()) {
      wrt.push_back(inputs[i]);
      which.push_back(i);
    }
  }
  auto grads = backward(f(inputs), wrt);
  double worst = 0;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    worst = std::max(worst, rel_err(as_double(grads[k]), fd_gradient<T>(f, inputs, which[k], step)));
  }
  return worst;
}

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                        double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Smallest distance to a non-differentiable point among the relu inputs and
/// max-over-time comparisons recorded in `graph`.
template <class T>
double kink_margin(const Graph<T>& graph) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& node : graph.nodes()) {
    const std::string op = node->op;
    if (op == "relu") {
      for (T v : node->inputs[0]->value) margin = std::min(margin, std::abs(static_cast<double>(v)));
    } else if (op == "max_over_time") {
      const auto& in = node->inputs[0];
      const std::size_t c = in->shape.back();
      const std::size_t len = in->shape[in->shape.size() - 2];
      const std::size_t batch = in->value.size() / (len * c);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < c; ++j) {
          double best = -std::numeric_limits<double>::infinity(), second = best;
          for (std::size_t t = 0; t < len; ++t) {
            const double v = in->value[(b * len + t) * c + j];
            if (v > best) {
              second = best;
              best = v;
            } else if (v > second) {
              second = v;
            }
          }
          // A tie among relu zeros is harmless: every branch carries zero gradient
          // and the relu margin already covers leaving zero.
          if (len > 1 && !(in->op == "relu" && best == 0)) margin = std::min(margin, best - second);
        }
      }
    }
  }
  return margin;
}

}  // namespace textdistill::testing

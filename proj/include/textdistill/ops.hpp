// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable primitives. Each backward rule is composed from primitives in
// this file, which keeps the set closed under differentiation: the adjoint of
// conv1d_valid is built from conv_input_grad/conv_filter_grad, whose adjoints
// are conv1d_valid again, and likewise for the gather/scatter and
// slice/pad pairs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <type_traits>
#include <vector>

#include "textdistill/tensor.hpp"

namespace textdistill {

// Forward declarations; backward rules refer to each other.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& x, double c);
template <class T> Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s);
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> expand(const Tensor<T>& s, const Shape& shape);
template <class T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> transpose(const Tensor<T>& a);
template <class T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);
template <class T> Tensor<T> sum_leading(const Tensor<T>& x);
template <class T> Tensor<T> broadcast_leading(const Tensor<T>& b, const Shape& shape);
template <class T> Tensor<T> row_sum(const Tensor<T>& x);
template <class T> Tensor<T> broadcast_cols(const Tensor<T>& v, std::size_t cols);
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <class T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t offset, std::size_t width);
template <class T> Tensor<T> pad_cols(const Tensor<T>& x, std::size_t offset, std::size_t total);
template <class T> Tensor<T> index_select0(const Tensor<T>& x, const std::vector<std::size_t>& idx);
template <class T> Tensor<T> conv1d_valid(const Tensor<T>& input, const Tensor<T>& filters);
template <class T> Tensor<T> conv1d_valid(const Tensor<T>& input, const Tensor<T>& filters, const Tensor<T>& bias);
template <class T> Tensor<T> max_over_time(const Tensor<T>& input);
template <class T> Tensor<T> softmax(const Tensor<T>& logits);

namespace detail {

template <class T>
using Acc = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <class T>
const std::vector<T>& in(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->value;
}

template <class T>
Tensor<T> input_of(const Tensor<T>& self, std::size_t i) {
  return Tensor<T>::from_node(self.node()->inputs[i]);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(Errc::ShapeMismatch,
                std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw Error(Errc::ShapeMismatch, std::string(op) + ": expected rank " + std::to_string(rank) +
                                         ", got " + shape_str(a.shape()));
  }
}

using Grads = std::vector<bool>;

template <class T>
std::vector<Tensor<T>> grads_of(std::initializer_list<Tensor<T>> g) {
  return std::vector<Tensor<T>>(g);
}

template <class T>
void zero(Node<T>& n) {
  std::fill(n.value.begin(), n.value.end(), T(0));
}

using Index = std::shared_ptr<const std::vector<std::size_t>>;

// Batched 1-D convolution kernels over row-major [B x L x d] inputs with a
// [h x d x c] filterbank. A window of h rows is contiguous, so each output row
// is a (h*d)-vector times an (h*d) x c matrix.
template <class T>
void conv_forward_kernel(const T* x, std::size_t batch, std::size_t len, std::size_t d, const T* w,
                         std::size_t h, std::size_t c, const T* bias, T* y) {
  const std::size_t out_len = len - h + 1;
  const std::size_t window = h * d;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      T* yrow = y + (b * out_len + t) * c;
      for (std::size_t j = 0; j < c; ++j) yrow[j] = bias ? bias[j] : T(0);
      const T* win = x + (b * len + t) * d;
      for (std::size_t q = 0; q < window; ++q) {
        const T xv = win[q];
        if (xv == T(0)) continue;
        const T* wrow = w + q * c;
        for (std::size_t j = 0; j < c; ++j) yrow[j] += xv * wrow[j];
      }
    }
  }
}

template <class T>
void conv_input_grad_kernel(const T* dy, std::size_t batch, std::size_t out_len, std::size_t c, const T* w,
                            std::size_t h, std::size_t d, T* dx) {
  const std::size_t len = out_len + h - 1;
  const std::size_t window = h * d;
  std::fill(dx, dx + batch * len * d, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      const T* g = dy + (b * out_len + t) * c;
      T* dwin = dx + (b * len + t) * d;
      for (std::size_t q = 0; q < window; ++q) {
        const T* wrow = w + q * c;
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += g[j] * wrow[j];
        dwin[q] += acc;
      }
    }
  }
}

template <class T>
void conv_filter_grad_kernel(const T* x, std::size_t batch, std::size_t len, std::size_t d, const T* dy,
                             std::size_t out_len, std::size_t c, T* dw) {
  const std::size_t h = len - out_len + 1;
  const std::size_t window = h * d;
  std::fill(dw, dw + window * c, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < out_len; ++t) {
      const T* g = dy + (b * out_len + t) * c;
      const T* win = x + (b * len + t) * d;
      for (std::size_t q = 0; q < window; ++q) {
        const T xv = win[q];
        if (xv == T(0)) continue;
        T* wrow = dw + q * c;
        for (std::size_t j = 0; j < c; ++j) wrow[j] += xv * g[j];
      }
    }
  }
}

// [L x d] is treated as a batch of one; the output keeps the input's rank.
struct SeqDims {
  std::size_t batch, len, width;
  bool batched;
};

template <class T>
SeqDims seq_dims(const Tensor<T>& x, const char* op) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1), false};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2), true};
  throw Error(Errc::ShapeMismatch, std::string(op) + ": expected [L x d] or [B x L x d], got " +
                                       shape_str(x.shape()));
}

inline Shape seq_shape(const SeqDims& s, std::size_t len, std::size_t width) {
  return s.batched ? Shape{s.batch, len, width} : Shape{len, width};
}

template <class T> Tensor<T> conv_input_grad(const Tensor<T>& dy, const Tensor<T>& filters);
template <class T> Tensor<T> conv_filter_grad(const Tensor<T>& input, const Tensor<T>& dy);
template <class T> Tensor<T> gather_time(const Tensor<T>& x, const Index& idx);
template <class T> Tensor<T> scatter_time(const Tensor<T>& g, const Index& idx, const Shape& out_shape);
template <class T> Tensor<T> mask_mul(const Tensor<T>& x, std::shared_ptr<const std::vector<T>> mask);
template <class T> Tensor<T> index_add0(const Tensor<T>& g, const Index& idx, std::size_t rows);

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_op<T>(
      "add", a.shape(), {a, b},
      [](detail::Node<T>& n) {
        const auto& x = detail::in(n, 0);
        const auto& y = detail::in(n, 1);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] + y[i];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{g, g};
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_op<T>(
      "sub", a.shape(), {a, b},
      [](detail::Node<T>& n) {
        const auto& x = detail::in(n, 0);
        const auto& y = detail::in(n, 1);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] - y[i];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads& needs) {
        return std::vector<Tensor<T>>{g, needs[1] ? scale(g, -1.0) : Tensor<T>{}};
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  return detail::make_op<T>(
      "mul", a.shape(), {a, b},
      [](detail::Node<T>& n) {
        const auto& x = detail::in(n, 0);
        const auto& y = detail::in(n, 1);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = x[i] * y[i];
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads& needs) {
        const auto a = detail::input_of(self, 0);
        const auto b = detail::input_of(self, 1);
        return std::vector<Tensor<T>>{needs[0] ? mul(g, b) : Tensor<T>{}, needs[1] ? mul(g, a) : Tensor<T>{}};
      });
}

/// Multiplication by a constant.
template <class T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  return detail::make_op<T>(
      "scale", x.shape(), {x},
      [c](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        const T k = static_cast<T>(c);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = k * v[i];
      },
      [c](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{scale(g, c)};
      });
}

/// Multiplication by a differentiable scalar tensor.
template <class T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw Error(Errc::ShapeMismatch, "scale_by: factor must be scalar");
  return detail::make_op<T>(
      "scale_by", x.shape(), {x, s},
      [](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        const T k = detail::in(n, 1)[0];
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = k * v[i];
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads& needs) {
        const auto x = detail::input_of(self, 0);
        const auto s = detail::input_of(self, 1);
        Tensor<T> ds;
        if (needs[1]) ds = reshape(sum(mul(g, x)), s.shape());
        return std::vector<Tensor<T>>{needs[0] ? scale_by(g, s) : Tensor<T>{}, ds};
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  return detail::make_op<T>(
      "sum", Shape{}, {x},
      [](detail::Node<T>& n) {
        detail::Acc<T> acc = 0;
        for (T v : detail::in(n, 0)) acc += v;
        n.value[0] = static_cast<T>(acc);
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{expand(g, detail::input_of(self, 0).shape())};
      });
}

/// Broadcasts a one-element tensor to `shape`.
template <class T>
Tensor<T> expand(const Tensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw Error(Errc::ShapeMismatch, "expand: source must hold one value");
  return detail::make_op<T>(
      "expand", shape, {s},
      [](detail::Node<T>& n) { std::fill(n.value.begin(), n.value.end(), detail::in(n, 0)[0]); },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{reshape(sum(g), detail::input_of(self, 0).shape())};
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw Error(Errc::ShapeMismatch, "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  if (shape == x.shape()) return x;
  return detail::make_op<T>(
      "reshape", shape, {x}, [](detail::Node<T>& n) { n.value = detail::in(n, 0); },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{reshape(g, detail::input_of(self, 0).shape())};
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw Error(Errc::ShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return detail::make_op<T>(
      "matmul", Shape{m, n}, {a, b},
      [m, k, n](detail::Node<T>& node) {
        const T* x = detail::in(node, 0).data();
        const T* y = detail::in(node, 1).data();
        T* out = node.value.data();
        std::fill(node.value.begin(), node.value.end(), T(0));
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T xv = x[i * k + p];
            if (xv == T(0)) continue;
            const T* yrow = y + p * n;
            T* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
          }
        }
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads& needs) {
        const auto a = detail::input_of(self, 0);
        const auto b = detail::input_of(self, 1);
        return std::vector<Tensor<T>>{needs[0] ? matmul(g, transpose(b)) : Tensor<T>{},
                                      needs[1] ? matmul(transpose(a), g) : Tensor<T>{}};
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return detail::make_op<T>(
      "transpose", Shape{c, r}, {a},
      [r, c](detail::Node<T>& n) {
        const auto& x = detail::in(n, 0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) n.value[j * r + i] = x[i * c + j];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{transpose(g)};
      });
}

/// x[..., n] + b[n], the only broadcast pattern supported.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() == 0 || b.rank() != 1 || b.dim(0) != x.shape().back()) {
    throw Error(Errc::ShapeMismatch, "add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t n = b.dim(0);
  return detail::make_op<T>(
      "add_bias", x.shape(), {x, b},
      [n](detail::Node<T>& node) {
        const auto& v = detail::in(node, 0);
        const auto& bias = detail::in(node, 1);
        for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] = v[i] + bias[i % n];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads& needs) {
        return std::vector<Tensor<T>>{g, needs[1] ? sum_leading(g) : Tensor<T>{}};
      });
}

/// Sums every axis except the last: [..., n] -> [n].
template <class T>
Tensor<T> sum_leading(const Tensor<T>& x) {
  if (x.rank() == 0) throw Error(Errc::ShapeMismatch, "sum_leading on a scalar");
  const std::size_t n = x.shape().back();
  return detail::make_op<T>(
      "sum_leading", Shape{n}, {x},
      [n](detail::Node<T>& node) {
        const auto& v = detail::in(node, 0);
        std::vector<detail::Acc<T>> acc(n, 0);
        for (std::size_t i = 0; i < v.size(); ++i) acc[i % n] += v[i];
        for (std::size_t j = 0; j < n; ++j) node.value[j] = static_cast<T>(acc[j]);
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{broadcast_leading(g, detail::input_of(self, 0).shape())};
      });
}

template <class T>
Tensor<T> broadcast_leading(const Tensor<T>& b, const Shape& shape) {
  if (b.rank() != 1 || shape.empty() || shape.back() != b.dim(0)) {
    throw Error(Errc::ShapeMismatch, "broadcast_leading " + shape_str(b.shape()) + " -> " + shape_str(shape));
  }
  const std::size_t n = b.dim(0);
  return detail::make_op<T>(
      "broadcast_leading", shape, {b},
      [n](detail::Node<T>& node) {
        const auto& v = detail::in(node, 0);
        for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] = v[i % n];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{sum_leading(g)};
      });
}

/// [B x C] -> [B]
template <class T>
Tensor<T> row_sum(const Tensor<T>& x) {
  detail::require_rank(x, 2, "row_sum");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  return detail::make_op<T>(
      "row_sum", Shape{rows}, {x},
      [rows, cols](detail::Node<T>& node) {
        const auto& v = detail::in(node, 0);
        for (std::size_t i = 0; i < rows; ++i) {
          detail::Acc<T> acc = 0;
          for (std::size_t j = 0; j < cols; ++j) acc += v[i * cols + j];
          node.value[i] = static_cast<T>(acc);
        }
      },
      [cols](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{broadcast_cols(g, cols)};
      });
}

/// [B] -> [B x cols], repeating each entry along its row.
template <class T>
Tensor<T> broadcast_cols(const Tensor<T>& v, std::size_t cols) {
  detail::require_rank(v, 1, "broadcast_cols");
  const std::size_t rows = v.dim(0);
  return detail::make_op<T>(
      "broadcast_cols", Shape{rows, cols}, {v},
      [cols](detail::Node<T>& node) {
        const auto& src = detail::in(node, 0);
        for (std::size_t i = 0; i < node.value.size(); ++i) node.value[i] = src[i / cols];
      },
      [](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{row_sum(g)};
      });
}

// ---------------------------------------------------------------------------
// Activations and layers

namespace detail {

template <class T>
Tensor<T> mask_mul(const Tensor<T>& x, std::shared_ptr<const std::vector<T>> mask) {
  return make_op<T>(
      "mask_mul", x.shape(), {x},
      [mask](Node<T>& n) {
        const auto& v = in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = v[i] * (*mask)[i];
      },
      [mask](const Tensor<T>&, const Tensor<T>& g, const Grads&) {
        return std::vector<Tensor<T>>{mask_mul(g, mask)};
      });
}

}  // namespace detail

/// max(x, 0); the subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::make_op<T>(
      "relu", x.shape(), {x},
      [](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = v[i] > T(0) ? v[i] : T(0);
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        const auto x = detail::input_of(self, 0).values();
        auto mask = std::make_shared<std::vector<T>>(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) (*mask)[i] = x[i] > T(0) ? T(1) : T(0);
        return std::vector<Tensor<T>>{detail::mask_mul<T>(g, std::move(mask))};
      });
}

/// x[B x n] W[n x m] + b[m]
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x, 2, "affine");
  detail::require_rank(w, 2, "affine");
  if (b.rank() != 1 || b.dim(0) != w.dim(1) || x.dim(1) != w.dim(0)) {
    throw Error(Errc::ShapeMismatch, "affine: " + shape_str(x.shape()) + " * " + shape_str(w.shape()) + " + " +
                                         shape_str(b.shape()));
  }
  return add_bias(matmul(x, w), b);
}

template <class T>
Tensor<T> conv1d_valid(const Tensor<T>& input, const Tensor<T>& filters, const Tensor<T>& bias) {
  auto s = detail::seq_dims(input, "conv1d_valid");
  detail::require_rank(filters, 3, "conv1d_valid");
  const std::size_t h = filters.dim(0), c = filters.dim(2);
  if (filters.dim(1) != s.width) {
    throw Error(Errc::ShapeMismatch, "conv1d_valid: input " + shape_str(input.shape()) + " vs filters " +
                                         shape_str(filters.shape()));
  }
  if (h > s.len) {
    throw Error(Errc::FilterTooLong, "filter width " + std::to_string(h) + " exceeds length " +
                                         std::to_string(s.len));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != c)) {
    throw Error(Errc::ShapeMismatch, "conv1d_valid: bias " + shape_str(bias.shape()));
  }
  std::vector<Tensor<T>> inputs{input, filters};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<T>(
      "conv1d_valid", detail::seq_shape(s, s.len - h + 1, c), std::move(inputs),
      [s, h, c, has_bias](detail::Node<T>& n) {
        detail::conv_forward_kernel(detail::in(n, 0).data(), s.batch, s.len, s.width, detail::in(n, 1).data(), h,
                                    c, has_bias ? detail::in(n, 2).data() : nullptr, n.value.data());
      },
      [has_bias](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads& needs) {
        const auto x = detail::input_of(self, 0);
        const auto w = detail::input_of(self, 1);
        std::vector<Tensor<T>> out{needs[0] ? detail::conv_input_grad(g, w) : Tensor<T>{},
                                   needs[1] ? detail::conv_filter_grad(x, g) : Tensor<T>{}};
        if (has_bias) out.push_back(needs[2] ? sum_leading(g) : Tensor<T>{});
        return out;
      });
}

template <class T>
Tensor<T> conv1d_valid(const Tensor<T>& input, const Tensor<T>& filters) {
  return conv1d_valid(input, filters, Tensor<T>{});
}

namespace detail {

/// Adjoint of conv1d_valid with respect to its input.
template <class T>
Tensor<T> conv_input_grad(const Tensor<T>& dy, const Tensor<T>& filters) {
  auto s = seq_dims(dy, "conv_input_grad");
  const std::size_t h = filters.dim(0), d = filters.dim(1), c = filters.dim(2);
  if (s.width != c) throw Error(Errc::ShapeMismatch, "conv_input_grad: channel mismatch");
  return make_op<T>(
      "conv_input_grad", seq_shape(s, s.len + h - 1, d), {dy, filters},
      [s, h, d, c](Node<T>& n) {
        conv_input_grad_kernel(in(n, 0).data(), s.batch, s.len, c, in(n, 1).data(), h, d, n.value.data());
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const Grads& needs) {
        const auto dy = input_of(self, 0);
        const auto w = input_of(self, 1);
        return std::vector<Tensor<T>>{needs[0] ? conv1d_valid(g, w) : Tensor<T>{},
                                      needs[1] ? conv_filter_grad(g, dy) : Tensor<T>{}};
      });
}

/// Adjoint of conv1d_valid with respect to its filterbank.
template <class T>
Tensor<T> conv_filter_grad(const Tensor<T>& input, const Tensor<T>& dy) {
  auto sx = seq_dims(input, "conv_filter_grad");
  auto sy = seq_dims(dy, "conv_filter_grad");
  if (sx.batch != sy.batch || sy.len > sx.len) throw Error(Errc::ShapeMismatch, "conv_filter_grad");
  const std::size_t h = sx.len - sy.len + 1;
  const std::size_t d = sx.width, c = sy.width;
  return make_op<T>(
      "conv_filter_grad", Shape{h, d, c}, {input, dy},
      [sx, sy](Node<T>& n) {
        conv_filter_grad_kernel(in(n, 0).data(), sx.batch, sx.len, sx.width, in(n, 1).data(), sy.len, sy.width,
                                n.value.data());
      },
      [](const Tensor<T>& self, const Tensor<T>& g, const Grads& needs) {
        const auto x = input_of(self, 0);
        const auto dy = input_of(self, 1);
        return std::vector<Tensor<T>>{needs[0] ? conv_input_grad(dy, g) : Tensor<T>{},
                                      needs[1] ? conv1d_valid(x, g) : Tensor<T>{}};
      });
}

// Picks x[b, idx[b,j], j] from [B x T x c] (or [T x c]).
template <class T>
Tensor<T> gather_time(const Tensor<T>& x, const Index& idx) {
  auto s = seq_dims(x, "gather_time");
  const std::size_t c = s.width, len = s.len;
  Shape out = s.batched ? Shape{s.batch, c} : Shape{c};
  return make_op<T>(
      "gather_time", out, {x},
      [idx, len, c](Node<T>& n) {
        const auto& v = in(n, 0);
        for (std::size_t k = 0; k < n.value.size(); ++k) {
          const std::size_t b = k / c, j = k % c;
          n.value[k] = v[(b * len + (*idx)[k]) * c + j];
        }
      },
      [idx](const Tensor<T>& self, const Tensor<T>& g, const Grads&) {
        return std::vector<Tensor<T>>{scatter_time(g, idx, input_of(self, 0).shape())};
      });
}

template <class T>
Tensor<T> scatter_time(const Tensor<T>& g, const Index& idx, const Shape& out_shape) {
  const std::size_t len = out_shape[out_shape.size() - 2];
  const std::size_t c = out_shape.back();
  return make_op<T>(
      "scatter_time", out_shape, {g},
      [idx, len, c](Node<T>& n) {
        zero(n);
        const auto& v = in(n, 0);
        for (std::size_t k = 0; k < v.size(); ++k) {
          const std::size_t b = k / c, j = k % c;
          n.value[(b * len + (*idx)[k]) * c + j] += v[k];
        }
      },
      [idx](const Tensor<T>&, const Tensor<T>& g2, const Grads&) {
        return std::vector<Tensor<T>>{gather_time(g2, idx)};
      });
}

template <class T>
Tensor<T> index_add0(const Tensor<T>& g, const Index& idx, std::size_t rows) {
  Shape out = g.shape();
  out[0] = rows;
  const std::size_t stride = g.numel() / g.dim(0);
  return make_op<T>(
      "index_add0", out, {g},
      [idx, stride](Node<T>& n) {
        zero(n);
        const auto& v = in(n, 0);
        for (std::size_t r = 0; r < idx->size(); ++r)
          for (std::size_t q = 0; q < stride; ++q) n.value[(*idx)[r] * stride + q] += v[r * stride + q];
      },
      [idx](const Tensor<T>&, const Tensor<T>& g2, const Grads&) {
        return std::vector<Tensor<T>>{index_select0(g2, *idx)};
      });
}

}  // namespace detail

/// Per-channel maximum over the time axis: [T x c] -> [c], [B x T x c] -> [B x c].
/// The gradient goes to the first position attaining the maximum.
template <class T>
Tensor<T> max_over_time(const Tensor<T>& input) {
  auto s = detail::seq_dims(input, "max_over_time");
  if (s.len == 0) throw Error(Errc::EmptyTime, "max_over_time over zero positions");
  const std::size_t len = s.len, c = s.width;
  auto idx = std::make_shared<std::vector<std::size_t>>(s.batch * c);
  Shape out = s.batched ? Shape{s.batch, c} : Shape{c};
  return detail::make_op<T>(
      "max_over_time", out, {input},
      [idx, len, c](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        for (std::size_t k = 0; k < n.value.size(); ++k) {
          const std::size_t b = k / c, j = k % c;
          std::size_t best = 0;
          T best_v = v[(b * len) * c + j];
          for (std::size_t t = 1; t < len; ++t) {
            const T x = v[(b * len + t) * c + j];
            if (x > best_v) {
              best_v = x;
              best = t;
            }
          }
          (*idx)[k] = best;
          n.value[k] = best_v;
        }
      },
      [idx](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        auto frozen = std::make_shared<const std::vector<std::size_t>>(*idx);
        return std::vector<Tensor<T>>{detail::scatter_time(g, detail::Index(frozen), detail::input_of(self, 0).shape())};
      });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenates [B x n_i] blocks along columns.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "concat_cols of nothing");
  const std::size_t rows = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw Error(Errc::ShapeMismatch, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  return detail::make_op<T>(
      "concat_cols", Shape{rows, total}, parts,
      [widths, rows, total](detail::Node<T>& n) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          const auto& v = detail::in(n, p);
          for (std::size_t i = 0; i < rows; ++i)
            std::copy_n(v.begin() + i * widths[p], widths[p], n.value.begin() + i * total + off);
          off += widths[p];
        }
      },
      [widths](const Tensor<T>&, const Tensor<T>& g, const detail::Grads& needs) {
        std::vector<Tensor<T>> out;
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          out.push_back(needs[p] ? slice_cols(g, off, widths[p]) : Tensor<T>{});
          off += widths[p];
        }
        return out;
      });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t offset, std::size_t width) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), total = x.dim(1);
  if (offset + width > total) throw Error(Errc::ShapeMismatch, "slice_cols out of range");
  return detail::make_op<T>(
      "slice_cols", Shape{rows, width}, {x},
      [rows, total, offset, width](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        for (std::size_t i = 0; i < rows; ++i)
          std::copy_n(v.begin() + i * total + offset, width, n.value.begin() + i * width);
      },
      [offset, total](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{pad_cols(g, offset, total)};
      });
}

template <class T>
Tensor<T> pad_cols(const Tensor<T>& x, std::size_t offset, std::size_t total) {
  detail::require_rank(x, 2, "pad_cols");
  const std::size_t rows = x.dim(0), width = x.dim(1);
  if (offset + width > total) throw Error(Errc::ShapeMismatch, "pad_cols out of range");
  return detail::make_op<T>(
      "pad_cols", Shape{rows, total}, {x},
      [rows, total, offset, width](detail::Node<T>& n) {
        detail::zero(n);
        const auto& v = detail::in(n, 0);
        for (std::size_t i = 0; i < rows; ++i)
          std::copy_n(v.begin() + i * width, width, n.value.begin() + i * total + offset);
      },
      [offset, width](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{slice_cols(g, offset, width)};
      });
}

/// Selects rows along the first axis.
template <class T>
Tensor<T> index_select0(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  if (x.rank() == 0) throw Error(Errc::ShapeMismatch, "index_select0 on a scalar");
  for (auto r : rows) {
    if (r >= x.dim(0)) throw Error(Errc::ShapeMismatch, "index_select0: row out of range");
  }
  Shape out = x.shape();
  out[0] = rows.size();
  const std::size_t stride = x.numel() / std::max<std::size_t>(x.dim(0), 1);
  auto idx = std::make_shared<const std::vector<std::size_t>>(rows);
  const std::size_t n0 = x.dim(0);
  return detail::make_op<T>(
      "index_select0", out, {x},
      [idx, stride](detail::Node<T>& n) {
        const auto& v = detail::in(n, 0);
        for (std::size_t r = 0; r < idx->size(); ++r)
          std::copy_n(v.begin() + (*idx)[r] * stride, stride, n.value.begin() + r * stride);
      },
      [idx, n0](const Tensor<T>&, const Tensor<T>& g, const detail::Grads&) {
        return std::vector<Tensor<T>>{detail::index_add0(g, detail::Index(idx), n0)};
      });
}

// ---------------------------------------------------------------------------
// Classification

/// Row-wise softmax of [B x C].
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "softmax");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  return detail::make_op<T>(
      "softmax", logits.shape(), {logits},
      [rows, cols](detail::Node<T>& n) {
        const auto& z = detail::in(n, 0);
        for (std::size_t i = 0; i < rows; ++i) {
          const T* zr = z.data() + i * cols;
          T* out = n.value.data() + i * cols;
          const T mx = *std::max_element(zr, zr + cols);
          detail::Acc<T> total = 0;
          for (std::size_t j = 0; j < cols; ++j) total += std::exp(static_cast<detail::Acc<T>>(zr[j] - mx));
          for (std::size_t j = 0; j < cols; ++j)
            out[j] = static_cast<T>(std::exp(static_cast<detail::Acc<T>>(zr[j] - mx)) / total);
        }
      },
      [cols](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        // ds = s * (g - rowsum(g * s))
        return std::vector<Tensor<T>>{mul(self, sub(g, broadcast_cols(row_sum(mul(g, self)), cols)))};
      });
}

/// Mean over the batch of -log softmax(logits)[label].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw Error(Errc::ShapeMismatch, "softmax_cross_entropy: label count");
  for (auto y : labels) {
    if (y >= cols) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(y) + " with " +
                                                         std::to_string(cols) + " classes");
  }
  auto lab = std::make_shared<const std::vector<std::size_t>>(labels);
  return detail::make_op<T>(
      "softmax_cross_entropy", Shape{}, {logits},
      [lab, rows, cols](detail::Node<T>& n) {
        using A = detail::Acc<T>;
        const auto& z = detail::in(n, 0);
        A total = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          const T* zr = z.data() + i * cols;
          const A mx = *std::max_element(zr, zr + cols);
          A se = 0;
          for (std::size_t j = 0; j < cols; ++j) se += std::exp(static_cast<A>(zr[j]) - mx);
          total += mx + std::log(se) - static_cast<A>(zr[(*lab)[i]]);
        }
        n.value[0] = static_cast<T>(total / static_cast<A>(rows));
      },
      [lab, rows, cols](const Tensor<T>& self, const Tensor<T>& g, const detail::Grads&) {
        std::vector<T> hot(rows * cols, T(0));
        for (std::size_t i = 0; i < rows; ++i) hot[i * cols + (*lab)[i]] = T(1);
        const Tensor<T> onehot(Shape{rows, cols}, std::move(hot));
        const auto z = detail::input_of(self, 0);
        auto dz = scale(sub(softmax(z), onehot), 1.0 / static_cast<double>(rows));
        return std::vector<Tensor<T>>{scale_by(dz, g)};
      });
}

}  // namespace textdistill

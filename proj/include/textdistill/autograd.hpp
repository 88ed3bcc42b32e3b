// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "textdistill/ops.hpp"

namespace textdistill {

/// Reverse-mode gradients of a scalar `loss` with respect to each tensor in
/// `wrt`. Any node on the graph may be differentiated against, not only
/// leaves. With create_graph the returned gradients are themselves graph nodes
/// and can be differentiated again (double backward, Hessian-vector products).
/// Tensors that require grad but do not influence `loss` get a zero gradient.
template <class T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss, const std::vector<Tensor<T>>& wrt, bool create_graph = false) {
  using detail::Node;
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(Errc::NotScalar, "backward needs a one-element loss, got " +
                                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  std::unordered_set<const Node<T>*> targets;
  std::uint64_t min_seq = std::numeric_limits<std::uint64_t>::max();
  for (const auto& w : wrt) {
    if (!w.defined() || !w.requires_grad()) {
      throw Error(Errc::DetachedTensor, "differentiation target does not require grad");
    }
    targets.insert(w.node().get());
    min_seq = std::min(min_seq, w.node()->seq);
  }

  // Post-order over nodes that lie on a path from a target to the loss.
  // Inputs are always older than their consumers, so anything created before
  // the oldest target cannot lead to one and is never expanded.
  std::vector<detail::NodePtr<T>> order;
  std::unordered_map<const Node<T>*, bool> relevant;
  if (loss.requires_grad() && loss.node()->seq >= min_seq) {
    struct Frame {
      detail::NodePtr<T> node;
      std::size_t next;
    };
    std::vector<Frame> stack{{loss.node(), 0}};
    relevant.emplace(loss.node().get(), false);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->inputs.size()) {
        const detail::NodePtr<T>& child = f.node->inputs[f.next++];
        if (!child->requires_grad || child->seq < min_seq || relevant.count(child.get())) continue;
        relevant.emplace(child.get(), false);
        stack.push_back({child, 0});
        continue;
      }
      bool hit = targets.count(f.node.get()) > 0;
      for (const auto& in : f.node->inputs) {
        auto it = relevant.find(in.get());
        hit = hit || (it != relevant.end() && it->second);
      }
      relevant[f.node.get()] = hit;
      if (hit) order.push_back(f.node);
      stack.pop_back();
    }
  }

  std::optional<NoGradGuard> no_grad;
  if (!create_graph) no_grad.emplace();

  std::unordered_map<const Node<T>*, Tensor<T>> grads;
  if (!order.empty()) grads[loss.node().get()] = Tensor<T>::full(loss.shape(), T(1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const detail::NodePtr<T>& owner = *it;
    Node<T>* node = owner.get();
    auto git = grads.find(node);
    if (git == grads.end() || !node->backward) continue;
    std::vector<bool> needs(node->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < needs.size(); ++i) {
      auto r = relevant.find(node->inputs[i].get());
      needs[i] = r != relevant.end() && r->second;
      any = any || needs[i];
    }
    if (!any) continue;
    // Targets keep their gradient; other intermediates can be released once consumed.
    Tensor<T> g = targets.count(node) ? git->second : std::move(git->second);
    if (!targets.count(node)) grads.erase(git);
    auto input_grads = node->backward(Tensor<T>::from_node(owner), g, needs);
    for (std::size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i] || !input_grads[i].defined()) continue;
      const Node<T>* child = node->inputs[i].get();
      auto cit = grads.find(child);
      if (cit == grads.end()) {
        grads.emplace(child, input_grads[i]);
      } else {
        cit->second = add(cit->second, input_grads[i]);
      }
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node().get());
    out.push_back(it != grads.end() ? it->second : Tensor<T>::zeros(w.shape()));
  }
  return out;
}

/// Convenience for a single target.
template <class T>
Tensor<T> grad(const Tensor<T>& loss, const Tensor<T>& wrt, bool create_graph = false) {
  return backward(loss, std::vector<Tensor<T>>{wrt}, create_graph).front();
}

}  // namespace textdistill

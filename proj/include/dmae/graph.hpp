#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "dmae/tensor.hpp"

namespace dmae {

/// Handle to a node recorded on a Graph.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep over the node list is a valid topological order for backward.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf without gradient tracking.
  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }

  /// Leaf that tracks gradient but is not bound to a Parameter.
  Var input(Tensor<T> value) { return push(std::move(value), true, {}, nullptr); }

  /// Leaf bound to a Parameter; backward() adds its gradient into p.grad.
  Var param(Parameter<T>& p) {
    Var v = push(p.value, true, {}, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  /// Records an op result. `fn` runs during backward only if some parent
  /// requires a gradient.
  Var emit(Tensor<T> value, std::span<const Var> parents, BackwardFn fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || (p.valid() && nodes_[p.id].requires_grad);
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, nullptr);
  }
  Var emit(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return emit(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }

  /// Gradient buffer of `v`, allocated as zeros on first access.
  Tensor<T>& grad(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Seeds d(out)/d(out) = 1 for a single-element output and sweeps backward.
  void backward(Var out) {
    if (value(out).size() != 1) {
      throw Error(ErrorCode::kDimension, "backward requires a scalar output");
    }
    grad(out)[0] = T(1);
    for (std::int32_t id = out.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, Var{id});
      if (n.param != nullptr) {
        auto& dst = n.param->grad.storage();
        const auto& src = nodes_[id].grad.storage();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn, Parameter<T>* p) {
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), p, requires_grad});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

}  // namespace dmae

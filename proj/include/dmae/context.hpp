#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dmae/graph.hpp"

namespace dmae {

/// Attention weights and embeddings captured during a forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<std::pair<std::string, Tensor<T>>> kernel_weights;  // [B, K] per bank
  std::vector<std::pair<std::string, Tensor<T>>> scale_weights;   // [B, 3, T] per block
  Tensor<T> embedding;                                            // DPE output [B, n, T]
};

/// Per-pass switches shared by every layer.
template <typename T>
struct ForwardContext {
  Graph<T>& graph;
  bool training = false;
  /// Replace every attention softmax with uniform weights.
  bool warmup = false;
  /// Bind parameters as constants so no gradient reaches them.
  bool frozen = false;
  ForwardTrace<T>* trace = nullptr;

  Var bind(Parameter<T>& p) { return frozen ? graph.constant(p.value) : graph.param(p); }
};

}  // namespace dmae

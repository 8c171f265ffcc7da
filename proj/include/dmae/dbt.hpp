#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmae/context.hpp"
#include "dmae/init.hpp"
#include "dmae/ops.hpp"

namespace dmae {


/// K candidate kernels fused per sample by input-conditioned attention.
/// With K = 1 the bank degenerates to one static kernel.
template <typename T>
class DynamicKernelBank {
 public:
  DynamicKernelBank(std::string name, std::size_t out_channels, std::size_t in_channels,
                    std::size_t kernel_size, std::size_t groups, std::size_t length,
                    T temperature, Rng& rng);

  /// Returns [B, Cout, Cin, k] (or shared [Cout, Cin, k] when K = 1).
  /// With kBackward the statistics are those of the time-flipped input.
  Var aggregate(ForwardContext<T>& ctx, Var x, ops::Direction dir = ops::Direction::kForward);

  /// Attention weights [B, K] for the given input; uniform under warm-up.
  Var weights(ForwardContext<T>& ctx, Var x, ops::Direction dir = ops::Direction::kForward);

  /// Dilated convolution of x with its aggregated kernel. kBackward gives
  /// the same result as flip -> causal convolution -> flip.
  Var convolve(ForwardContext<T>& ctx, Var x, std::size_t dilation,
               ops::Direction dir = ops::Direction::kForward);

  std::size_t groups() const { return groups_; }
  std::size_t kernel_size() const { return kernel_size_; }
  T temperature() const { return temperature_; }
  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T> candidates;  // [K, Cout, Cin, k]
  Parameter<T> proj_weight;  // [Cin + T, K]
  Parameter<T> proj_bias;    // [K]

 private:
  std::string name_;
  std::size_t out_channels_, in_channels_, kernel_size_, groups_, length_;
  T temperature_;
};

/// One fused layer of a DBT unit: a forward CDC branch, a backward branch on
/// the time-flipped input, and a linear map merging both directions.
template <typename T>
class BidirectionalLayer {
 public:
  BidirectionalLayer(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                     std::size_t kernel_size, std::size_t dilation, std::size_t groups,
                     std::size_t length, T temperature, Rng& rng);

  Var forward_branch(ForwardContext<T>& ctx, Var x);
  /// Time-flipped branch: equal to flip, causal convolution, flip back, so
  /// the output at t depends on inputs >= t.
  Var backward_branch(ForwardContext<T>& ctx, Var x);
  /// relu(fuse([forward, backward]))
  Var forward(ForwardContext<T>& ctx, Var x);
  void collect(std::vector<Parameter<T>*>& out);

  DynamicKernelBank<T> fwd;
  DynamicKernelBank<T> bwd;
  Parameter<T> fuse_weight;  // [2 * Cout, Cout]
  Parameter<T> fuse_bias;    // [Cout]

 private:
  std::size_t dilation_;
};

/// Dynamic bidirectional TCN unit: two stacked bidirectional layers wrapped
/// in a residual connection (1x1 projection when widths differ).
template <typename T>
class DbtUnit {
 public:
  DbtUnit(const std::string& name, std::size_t in_channels, std::size_t out_channels,
          std::size_t kernel_size, std::size_t dilation, std::size_t groups, std::size_t length,
          T temperature, Rng& rng);

  Var forward(ForwardContext<T>& ctx, Var x);
  void collect(std::vector<Parameter<T>*>& out);

  std::vector<BidirectionalLayer<T>> layers;
  std::optional<Parameter<T>> residual_weight;  // [Cin, Cout]
  std::optional<Parameter<T>> residual_bias;    // [Cout]
};

/// Attention scale fusion over the three parallel unit outputs.
template <typename T>
class ScaleFusion {
 public:
  ScaleFusion(const std::string& name, std::size_t hidden, std::size_t attention_hidden,
              T temperature, Rng& rng);

  Var fuse(ForwardContext<T>& ctx, std::span<const Var> scales, const std::string& trace_name);
  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T> w_global;  // [h_s, h_a]
  Parameter<T> w_local;   // [h_s, h_a]
  Parameter<T> v;         // [h_a]
  T temperature;
};

/// Ablation stand-in for ScaleFusion: channel concatenation then a linear map.
template <typename T>
class ConcatFusion {
 public:
  ConcatFusion(const std::string& name, std::size_t hidden, Rng& rng);
  Var fuse(ForwardContext<T>& ctx, std::span<const Var> scales);
  void collect(std::vector<Parameter<T>*>& out);

  Parameter<T> weight;  // [3 * h_s, h_s]
  Parameter<T> bias;    // [h_s]
};

struct BlockShape {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::array<std::size_t, 3> kernel_sizes{3, 5, 7};
  std::size_t dilation = 1;
  std::size_t groups = 4;
  std::size_t length = 0;
  std::size_t attention_hidden = 0;
  double kernel_temperature = 4.0;
  double scale_temperature = 4.0;
  bool scale_attention = true;  // false: ConcatFusion
};

/// Three parallel DBT units (one kernel size each, shared dilation), batch
/// norm on each unit output, then scale fusion.
template <typename T>
class DbtBlock {
 public:
  DbtBlock(std::string name, const BlockShape& shape, Rng& rng);

  Var forward(ForwardContext<T>& ctx, Var x);
  void collect(std::vector<Parameter<T>*>& out);
  void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out);

  const BlockShape& shape() const { return shape_; }

  std::vector<DbtUnit<T>> units;
  std::vector<Parameter<T>> bn_gamma;
  std::vector<Parameter<T>> bn_beta;
  std::vector<ops::BatchNormState<T>> bn_state;
  std::optional<ScaleFusion<T>> asf;
  std::optional<ConcatFusion<T>> concat;

 private:
  std::string name_;
  BlockShape shape_;
};

}  // namespace dmae

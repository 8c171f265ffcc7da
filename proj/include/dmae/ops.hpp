#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmae/graph.hpp"

// Differentiable primitives. Sequence tensors use the [batch, channel, time]
// layout throughout; every op checks operand shapes and throws
// Error(kDimension) naming the offending operand.
namespace dmae::ops {

/// kForward convolves over the past (output at t sees inputs <= t);
/// kBackward over the future (output at t sees inputs >= t), which equals
/// flipping time, convolving causally and flipping back.
enum class Direction { kForward, kBackward };

/// y = x W + b over the trailing axis of x. `bias` may be an invalid Var.
template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias);

/// Per-time-step channel mixing: x [B, Cin, T], weight [Cin, Cout] -> [B, Cout, T].
template <typename T>
Var channel_linear(Graph<T>& g, Var x, Var weight, Var bias);

/// channel_linear applied to the channel concatenation of `parts` without
/// materialising it; weight rows follow the order of `parts`.
template <typename T>
Var channel_linear(Graph<T>& g, std::span<const Var> parts, Var weight, Var bias);

/// Causal dilated convolution with left zero padding of (k-1)*dilation.
/// kernel is either shared [Cout, Cin, k] or per-sample [B, Cout, Cin, k].
template <typename T>
Var causal_conv(Graph<T>& g, Var x, Var kernel, std::size_t dilation,
                Direction dir = Direction::kForward);

/// Reverses the last axis.
template <typename T>
Var flip_time(Graph<T>& g, Var x);

template <typename T>
Var concat(Graph<T>& g, std::span<const Var> parts, std::size_t axis);

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape);

template <typename T>
Var relu(Graph<T>& g, Var x);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var scale(Graph<T>& g, Var x, T factor);

/// Elementwise product with a constant tensor of the same shape.
template <typename T>
Var mul_const(Graph<T>& g, Var x, const Tensor<T>& c);

/// mask * a + (1 - mask) * b with a constant mask.
template <typename T>
Var blend(Graph<T>& g, const Tensor<T>& mask, Var a, Var b);

/// Row-wise exp(s/temperature) normalisation over the last axis.
template <typename T>
Var softmax_tempered(Graph<T>& g, Var scores, T temperature);

/// Arithmetic mean along `axis`; that axis is kept with size 1.
template <typename T>
Var avg_pool(Graph<T>& g, Var x, std::size_t axis);

/// Values at the final position of the last axis: [..., T] -> [...].
template <typename T>
Var last_step(Graph<T>& g, Var x);

/// out[b] = sum_i alpha[b, i] * bank[i]; alpha [B, K], bank [K, ...].
template <typename T>
Var kernel_mix(Graph<T>& g, Var alpha, Var bank);

/// causal_conv(x, kernel_mix(alpha, bank), dilation) without materialising
/// the per-sample kernels; bank is [K, Cout, Cin, k].
template <typename T>
Var dynamic_conv(Graph<T>& g, Var x, Var alpha, Var bank, std::size_t dilation,
                 Direction dir = Direction::kForward);

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

/// Per-channel normalisation over batch and time of x [B, C, T].
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state,
               bool training);

/// Attention scale fusion of three [B, h, T] maps. With `uniform` the
/// attention weights are fixed at 1/3. When `weights_out` is non-null it
/// receives the weights as [B, 3, T].
template <typename T>
Var asf_fuse(Graph<T>& g, std::span<const Var> scales, Var w_global, Var w_local,
             Var v, T temperature, bool uniform, Tensor<T>* weights_out = nullptr);

/// Per-sample ||(pred - target) o mask||_2 / ||mask||_2 -> [B]. Samples with
/// an all-zero mask yield 0.
template <typename T>
Var masked_norm_ratio(Graph<T>& g, Var pred, const Tensor<T>& target,
                      const Tensor<T>& mask);

template <typename T>
Var mean_all(Graph<T>& g, Var x);

/// Mean squared error against a constant target -> scalar.
template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target);

/// Mean cross entropy of softmax(logits [N, C]) against integer labels.
template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels);

/// Non-graph tempered softmax used by tools and tests.
template <typename T>
std::vector<T> softmax_tempered(std::span<const T> scores, T temperature);

}  // namespace dmae::ops

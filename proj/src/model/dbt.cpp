#include "dmae/dbt.hpp"

#include <cmath>

#include "dmae/init.hpp"

namespace dmae {

template <typename T>
DynamicKernelBank<T>::DynamicKernelBank(std::string name, std::size_t out_channels,
                                        std::size_t in_channels, std::size_t kernel_size,
                                        std::size_t groups, std::size_t length, T temperature,
                                        Rng& rng)
    : name_(std::move(name)),
      out_channels_(out_channels),
      in_channels_(in_channels),
      kernel_size_(kernel_size),
      groups_(groups),
      length_(length),
      temperature_(temperature) {
  if (groups == 0) throw Error(ErrorCode::kConfig, name_ + ": candidate count K must be >= 1");
  if (kernel_size == 0) throw Error(ErrorCode::kConfig, name_ + ": kernel size must be >= 1");
  if (groups > 1 && !(temperature > T(1))) {
    throw Error(ErrorCode::kConfig, name_ + ": kernel temperature must exceed 1");
  }
  // Every candidate gets its own fan-in scaled draw.
  candidates = Parameter<T>(name_ + ".kernels",
                            kaiming_normal<T>(Shape{groups, out_channels, in_channels, kernel_size},
                                              in_channels * kernel_size, rng));
  if (groups > 1) {
    const std::size_t stats = in_channels + length;
    proj_weight = Parameter<T>(name_ + ".attn_w",
                               uniform_init<T>(Shape{stats, groups},
                                               0.1 / std::sqrt(static_cast<double>(stats)), rng));
    proj_bias = Parameter<T>(name_ + ".attn_b", Tensor<T>(Shape{groups}));
  }
}

template <typename T>
Var DynamicKernelBank<T>::weights(ForwardContext<T>& ctx, Var x, ops::Direction dir) {
  auto& g = ctx.graph;
  const auto& xv = g.value(x);
  if (xv.rank() != 3 || xv.dim(1) != in_channels_ || xv.dim(2) != length_) {
    throw Error(ErrorCode::kConfig, name_ + ": input " + shape_string(xv.shape()) +
                                        " does not match bank built for [B," +
                                        std::to_string(in_channels_) + "," +
                                        std::to_string(length_) + "]");
  }
  const std::size_t batch = xv.dim(0);
  Var alpha;
  if (groups_ == 1 || ctx.warmup) {
    alpha = g.constant(Tensor<T>(Shape{batch, groups_}, T(1) / static_cast<T>(groups_)));
  } else {
    // [mean over time per channel, mean over channels per step]
    const Var per_channel = ops::reshape(g, ops::avg_pool(g, x, 2), Shape{batch, in_channels_});
    Var per_step = ops::reshape(g, ops::avg_pool(g, x, 1), Shape{batch, length_});
    if (dir == ops::Direction::kBackward) per_step = ops::flip_time(g, per_step);
    const std::array<Var, 2> parts = {per_channel, per_step};
    const Var pooled = ops::concat<T>(g, parts, 1);
    const Var scores = ops::linear(g, pooled, ctx.bind(proj_weight), ctx.bind(proj_bias));
    alpha = ops::softmax_tempered(g, scores, temperature_);
  }
  if (ctx.trace) ctx.trace->kernel_weights.emplace_back(name_, g.value(alpha));
  return alpha;
}

template <typename T>
Var DynamicKernelBank<T>::aggregate(ForwardContext<T>& ctx, Var x, ops::Direction dir) {
  auto& g = ctx.graph;
  const Var alpha = weights(ctx, x, dir);
  const Var bank = ctx.bind(candidates);
  if (groups_ == 1) {
    return ops::reshape(g, bank, Shape{out_channels_, in_channels_, kernel_size_});
  }
  return ops::kernel_mix(g, alpha, bank);
}

template <typename T>
Var DynamicKernelBank<T>::convolve(ForwardContext<T>& ctx, Var x, std::size_t dilation,
                                   ops::Direction dir) {
  auto& g = ctx.graph;
  const Var alpha = weights(ctx, x, dir);
  const Var bank = ctx.bind(candidates);
  if (groups_ == 1) {
    const Var kernel = ops::reshape(g, bank, Shape{out_channels_, in_channels_, kernel_size_});
    return ops::causal_conv(g, x, kernel, dilation, dir);
  }
  return ops::dynamic_conv(g, x, alpha, bank, dilation, dir);
}

template <typename T>
void DynamicKernelBank<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&candidates);
  if (groups_ > 1) {
    out.push_back(&proj_weight);
    out.push_back(&proj_bias);
  }
}

template <typename T>
BidirectionalLayer<T>::BidirectionalLayer(const std::string& name, std::size_t in_channels,
                                          std::size_t out_channels, std::size_t kernel_size,
                                          std::size_t dilation, std::size_t groups,
                                          std::size_t length, T temperature, Rng& rng)
    : fwd(name + ".fwd", out_channels, in_channels, kernel_size, groups, length, temperature, rng),
      bwd(name + ".bwd", out_channels, in_channels, kernel_size, groups, length, temperature, rng),
      fuse_weight(name + ".fuse_w", linear_init<T>(Shape{2 * out_channels, out_channels}, rng)),
      fuse_bias(name + ".fuse_b", linear_init<T>(Shape{out_channels}, rng, 2 * out_channels)),
      dilation_(dilation) {
  if (dilation == 0) throw Error(ErrorCode::kConfig, name + ": dilation must be >= 1");
}

template <typename T>
Var BidirectionalLayer<T>::forward_branch(ForwardContext<T>& ctx, Var x) {
  return fwd.convolve(ctx, x, dilation_);
}

template <typename T>
Var BidirectionalLayer<T>::backward_branch(ForwardContext<T>& ctx, Var x) {
  return bwd.convolve(ctx, x, dilation_, ops::Direction::kBackward);
}

template <typename T>
Var BidirectionalLayer<T>::forward(ForwardContext<T>& ctx, Var x) {
  auto& g = ctx.graph;
  const std::array<Var, 2> both = {forward_branch(ctx, x), backward_branch(ctx, x)};
  return ops::relu(g, ops::channel_linear<T>(g, both, ctx.bind(fuse_weight), ctx.bind(fuse_bias)));
}

template <typename T>
void BidirectionalLayer<T>::collect(std::vector<Parameter<T>*>& out) {
  fwd.collect(out);
  bwd.collect(out);
  out.push_back(&fuse_weight);
  out.push_back(&fuse_bias);
}

template <typename T>
DbtUnit<T>::DbtUnit(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                    std::size_t kernel_size, std::size_t dilation, std::size_t groups,
                    std::size_t length, T temperature, Rng& rng) {
  layers.reserve(2);
  layers.emplace_back(name + ".l0", in_channels, out_channels, kernel_size, dilation, groups,
                      length, temperature, rng);
  layers.emplace_back(name + ".l1", out_channels, out_channels, kernel_size, dilation, groups,
                      length, temperature, rng);
  if (in_channels != out_channels) {
    residual_weight.emplace(name + ".res_w", linear_init<T>(Shape{in_channels, out_channels}, rng));
    residual_bias.emplace(name + ".res_b", linear_init<T>(Shape{out_channels}, rng, in_channels));
  }
}

template <typename T>
Var DbtUnit<T>::forward(ForwardContext<T>& ctx, Var x) {
  Var h = x;
  for (auto& layer : layers) h = layer.forward(ctx, h);
  Var skip = x;
  if (residual_weight) {
    skip = ops::channel_linear(ctx.graph, x, ctx.bind(*residual_weight), ctx.bind(*residual_bias));
  }
  return ops::add(ctx.graph, h, skip);
}

template <typename T>
void DbtUnit<T>::collect(std::vector<Parameter<T>*>& out) {
  for (auto& layer : layers) layer.collect(out);
  if (residual_weight) {
    out.push_back(&*residual_weight);
    out.push_back(&*residual_bias);
  }
}

template <typename T>
ScaleFusion<T>::ScaleFusion(const std::string& name, std::size_t hidden,
                            std::size_t attention_hidden, T temp, Rng& rng)
    : w_global(name + ".W_g", linear_init<T>(Shape{hidden, attention_hidden}, rng)),
      w_local(name + ".W_H", linear_init<T>(Shape{hidden, attention_hidden}, rng)),
      v(name + ".v", uniform_init<T>(Shape{attention_hidden},
                                     0.1 / std::sqrt(static_cast<double>(attention_hidden)), rng)),
      temperature(temp) {
  if (!(temp > T(1))) throw Error(ErrorCode::kConfig, name + ": scale temperature must exceed 1");
}

template <typename T>
Var ScaleFusion<T>::fuse(ForwardContext<T>& ctx, std::span<const Var> scales,
                         const std::string& trace_name) {
  Tensor<T> alpha;
  const Var out = ops::asf_fuse(ctx.graph, scales, ctx.bind(w_global), ctx.bind(w_local),
                                ctx.bind(v), temperature, ctx.warmup,
                                ctx.trace ? &alpha : nullptr);
  if (ctx.trace) ctx.trace->scale_weights.emplace_back(trace_name, std::move(alpha));
  return out;
}

template <typename T>
void ScaleFusion<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&w_global);
  out.push_back(&w_local);
  out.push_back(&v);
}

template <typename T>
ConcatFusion<T>::ConcatFusion(const std::string& name, std::size_t hidden, Rng& rng)
    : weight(name + ".cat_w", linear_init<T>(Shape{3 * hidden, hidden}, rng)),
      bias(name + ".cat_b", linear_init<T>(Shape{hidden}, rng, 3 * hidden)) {}

template <typename T>
Var ConcatFusion<T>::fuse(ForwardContext<T>& ctx, std::span<const Var> scales) {
  if (scales.size() != 3) throw Error(ErrorCode::kConfig, "concat fusion expects 3 scale maps");
  const Var merged = ops::concat<T>(ctx.graph, scales, 1);
  return ops::channel_linear(ctx.graph, merged, ctx.bind(weight), ctx.bind(bias));
}

template <typename T>
void ConcatFusion<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
DbtBlock<T>::DbtBlock(std::string name, const BlockShape& shape, Rng& rng)
    : name_(std::move(name)), shape_(shape) {
  if (shape.in_channels == 0 || shape.out_channels == 0 || shape.length == 0) {
    throw Error(ErrorCode::kConfig, name_ + ": block dimensions must be positive");
  }
  const std::size_t ha = shape.attention_hidden ? shape.attention_hidden : shape.out_channels;
  units.reserve(3);
  for (std::size_t i = 0; i < 3; ++i) {
    units.emplace_back(name_ + ".unit" + std::to_string(i), shape.in_channels, shape.out_channels,
                       shape.kernel_sizes[i], shape.dilation, shape.groups, shape.length,
                       static_cast<T>(shape.kernel_temperature), rng);
    bn_gamma.emplace_back(name_ + ".bn" + std::to_string(i) + ".gamma",
                          Tensor<T>(Shape{shape.out_channels}, T(1)));
    bn_beta.emplace_back(name_ + ".bn" + std::to_string(i) + ".beta",
                         Tensor<T>(Shape{shape.out_channels}, T(0)));
    bn_state.emplace_back(shape.out_channels);
  }
  if (shape.scale_attention) {
    asf.emplace(name_ + ".asf", shape.out_channels, ha, static_cast<T>(shape.scale_temperature), rng);
  } else {
    concat.emplace(name_ + ".fusion", shape.out_channels, rng);
  }
}

template <typename T>
Var DbtBlock<T>::forward(ForwardContext<T>& ctx, Var x) {
  std::array<Var, 3> scales;
  for (std::size_t i = 0; i < 3; ++i) {
    scales[i] = ops::batch_norm(ctx.graph, units[i].forward(ctx, x), ctx.bind(bn_gamma[i]),
                                ctx.bind(bn_beta[i]), bn_state[i], ctx.training && !ctx.frozen);
  }
  if (asf) return asf->fuse(ctx, scales, name_ + ".asf");
  return concat->fuse(ctx, scales);
}

template <typename T>
void DbtBlock<T>::collect(std::vector<Parameter<T>*>& out) {
  for (std::size_t i = 0; i < 3; ++i) {
    units[i].collect(out);
    out.push_back(&bn_gamma[i]);
    out.push_back(&bn_beta[i]);
  }
  if (asf) asf->collect(out);
  if (concat) concat->collect(out);
}

template <typename T>
void DbtBlock<T>::collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  for (std::size_t i = 0; i < 3; ++i) {
    out.emplace_back(name_ + ".bn" + std::to_string(i) + ".running_mean", &bn_state[i].running_mean);
    out.emplace_back(name_ + ".bn" + std::to_string(i) + ".running_var", &bn_state[i].running_var);
  }
}

template class DynamicKernelBank<float>;
template class DynamicKernelBank<double>;
template class BidirectionalLayer<float>;
template class BidirectionalLayer<double>;
template class DbtUnit<float>;
template class DbtUnit<double>;
template class ScaleFusion<float>;
template class ScaleFusion<double>;
template class ConcatFusion<float>;
template class ConcatFusion<double>;
template class DbtBlock<float>;
template class DbtBlock<double>;

}  // namespace dmae

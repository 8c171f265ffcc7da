#include "dmae/model.hpp"

#include <spdlog/spdlog.h>

#include "dmae/data.hpp"

namespace dmae {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, what); };
  if (attributes == 0) fail("attributes must be >= 1");
  if (length == 0) fail("window length must be >= 1");
  if (hidden == 0) fail("hidden width h_s must be >= 1");
  for (auto k : kernel_sizes) {
    if (k == 0) fail("kernel sizes must be >= 1");
  }
  if (groups == 0) fail("candidate kernel count K must be >= 1");
  if (!(kernel_temperature > 1.0)) fail("kernel temperature must exceed 1");
  if (!(scale_temperature > 1.0)) fail("scale temperature must exceed 1");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) fail("mask ratio m_r must lie in [0, 1)");
  if (!(noise >= 0.0)) fail("noise scale must be >= 0");
}

std::array<double, 2> loss_weights(double m_r) { return {1.0 / (m_r + 1.0), m_r / (m_r + 1.0)}; }

template <typename T>
FeedForwardHead<T>::FeedForwardHead(const std::string& name, std::size_t in, std::size_t out,
                                    Rng& rng)
    : hidden_w(name + ".hidden_w", linear_init<T>(Shape{in, in}, rng)),
      hidden_b(name + ".hidden_b", linear_init<T>(Shape{in}, rng, in)),
      out_w(name + ".out_w", linear_init<T>(Shape{in, out}, rng)),
      out_b(name + ".out_b", linear_init<T>(Shape{out}, rng, in)) {
  if (in == 0 || out == 0) throw Error(ErrorCode::kConfig, name + ": head sizes must be >= 1");
}

template <typename T>
Var FeedForwardHead<T>::forward(ForwardContext<T>& ctx, Var pooled) {
  auto& g = ctx.graph;
  const Var h = ops::relu(g, ops::linear(g, pooled, g.param(hidden_w), g.param(hidden_b)));
  return ops::linear(g, h, g.param(out_w), g.param(out_b));
}

template <typename T>
void FeedForwardHead<T>::collect(std::vector<Parameter<T>*>& out) {
  out.push_back(&hidden_w);
  out.push_back(&hidden_b);
  out.push_back(&out_w);
  out.push_back(&out_b);
}

namespace {

BlockShape block_shape(const ModelConfig& c, std::size_t in, std::size_t out,
                       std::size_t dilation, std::size_t attention_hidden) {
  BlockShape s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_sizes = c.kernel_sizes;
  s.dilation = dilation;
  s.groups = c.effective_groups();
  s.length = c.length;
  s.attention_hidden = attention_hidden;
  s.kernel_temperature = c.kernel_temperature;
  s.scale_temperature = c.scale_temperature;
  s.scale_attention = c.use_asf;
  return s;
}

}  // namespace

template <typename T>
DmaeModel<T>::DmaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto n = config_.attributes;
  const auto h = config_.hidden;
  if (config_.use_dpe) dpe.emplace(block_shape(config_, n, n, 1, n), config_.noise, rng);
  blocks.reserve(3);
  for (std::size_t j = 0; j < 3; ++j) {
    blocks.emplace_back("enc" + std::to_string(j),
                        block_shape(config_, j == 0 ? n : h, h, std::size_t{1} << j,
                                    config_.effective_attention_hidden()),
                        rng);
  }
  dec_hidden_w = Parameter<T>("dec.hidden_w", linear_init<T>(Shape{h, h}, rng));
  dec_hidden_b = Parameter<T>("dec.hidden_b", linear_init<T>(Shape{h}, rng, h));
  dec_out_w = Parameter<T>("dec.out_w", linear_init<T>(Shape{h, n}, rng));
  dec_out_b = Parameter<T>("dec.out_b", linear_init<T>(Shape{n}, rng, h));
}

template <typename T>
Var DmaeModel<T>::encode(ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& mask,
                         const Tensor<T>& submask, const Tensor<T>* noise) {
  auto& g = ctx.graph;
  if (x.rank() != 3 || x.dim(1) != config_.attributes || x.dim(2) != config_.length) {
    throw Error(ErrorCode::kConfig, "input " + shape_string(x.shape()) +
                                        " does not match model built for [B," +
                                        std::to_string(config_.attributes) + "," +
                                        std::to_string(config_.length) + "]");
  }
  if (!mask.same_shape(x)) {
    throw Error(ErrorCode::kDimension, "mask shape " + shape_string(mask.shape()) +
                                           " differs from input " + shape_string(x.shape()));
  }
  const Var input = g.constant(x);
  Var h;
  if (dpe) {
    h = dpe->embed(ctx, input, mask, submask, noise);
  } else {
    check_submask(mask, submask);
    h = hard_code_embedding(g, input, submask, static_cast<T>(config_.token));
    if (ctx.trace) ctx.trace->embedding = g.value(h);
  }
  for (auto& block : blocks) h = block.forward(ctx, h);
  return h;
}

template <typename T>
Var DmaeModel<T>::decode(ForwardContext<T>& ctx, Var features) {
  auto& g = ctx.graph;
  const Var hidden = ops::relu(
      g, ops::channel_linear(g, features, ctx.bind(dec_hidden_w), ctx.bind(dec_hidden_b)));
  return ops::channel_linear(g, hidden, ctx.bind(dec_out_w), ctx.bind(dec_out_b));
}

template <typename T>
Var DmaeModel<T>::reconstruct(ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& mask,
                              const Tensor<T>& submask, const Tensor<T>* noise) {
  return decode(ctx, encode(ctx, x, mask, submask, noise));
}

template <typename T>
ReconstructionPair<T> DmaeModel<T>::forward_dual(ForwardContext<T>& ctx, const Tensor<T>& x,
                                                 const Tensor<T>& mask, Rng& rng) {
  ReconstructionPair<T> pair;
  pair.mask = mask;
  std::optional<Tensor<T>> noise;
  if (ctx.training && dpe) noise = dpe->draw_noise(x.shape(), rng);
  const Tensor<T>* shared = noise ? &*noise : nullptr;
  pair.full = reconstruct(ctx, x, mask, mask, shared);
  if (config_.use_rm) {
    pair.submask = data::random_submask(mask, config_.mask_ratio, rng);
    pair.masked = reconstruct(ctx, x, mask, pair.submask, shared);
  } else {
    pair.submask = mask;
  }
  return pair;
}

template <typename T>
std::vector<Parameter<T>*> DmaeModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  if (dpe) dpe->collect(out);
  for (auto& b : blocks) b.collect(out);
  out.push_back(&dec_hidden_w);
  out.push_back(&dec_hidden_b);
  out.push_back(&dec_out_w);
  out.push_back(&dec_out_b);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> DmaeModel<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  if (dpe) dpe->collect_buffers(out);
  for (auto& b : blocks) b.collect_buffers(out);
  return out;
}

template <typename T>
Var dmae_loss(Graph<T>& g, const ReconstructionPair<T>& pair, const Tensor<T>& x, double m_r) {
  if (!pair.masked.valid()) {
    throw Error(ErrorCode::kContract, "masked-reconstruction loss needs the random-masking path");
  }
  Tensor<T> removed = pair.mask;
  for (std::size_t i = 0; i < removed.size(); ++i) removed[i] -= pair.submask[i];
  const std::size_t batch = x.dim(0);
  const std::size_t per = x.size() / batch;
  std::size_t empty = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t i = 0; i < per && !any; ++i) any = removed[b * per + i] != T(0);
    if (!any) ++empty;
  }
  if (empty > 0) {
    spdlog::warn("{} window(s) have no artificially masked entries; first loss term is 0", empty);
  }
  const auto w = loss_weights(m_r);
  const Var first = ops::masked_norm_ratio(g, pair.masked, x, removed);
  const Var second = ops::masked_norm_ratio(g, pair.full, x, pair.mask);
  return ops::mean_all(g, ops::add(g, ops::scale(g, first, static_cast<T>(w[0])),
                                   ops::scale(g, second, static_cast<T>(w[1]))));
}

template <typename T>
Var training_objective(Graph<T>& g, const ReconstructionPair<T>& pair, const Tensor<T>& x,
                       double m_r) {
  if (!pair.masked.valid() || m_r == 0.0) {
    return ops::mean_all(g, ops::masked_norm_ratio(g, pair.full, x, pair.mask));
  }
  return dmae_loss(g, pair, x, m_r);
}

template <typename T>
Var head_pool(Graph<T>& g, Var features) {
  const auto& v = g.value(features);
  if (v.rank() != 3) throw Error(ErrorCode::kDimension, "head_pool expects [B, h_s, T] features");
  return ops::reshape(g, ops::avg_pool(g, features, 2), Shape{v.dim(0), v.dim(1)});
}

#define DMAE_INSTANTIATE_MODEL(T)                                                            \
  template class FeedForwardHead<T>;                                                         \
  template class DmaeModel<T>;                                                               \
  template Var dmae_loss<T>(Graph<T>&, const ReconstructionPair<T>&, const Tensor<T>&, double); \
  template Var training_objective<T>(Graph<T>&, const ReconstructionPair<T>&,                \
                                     const Tensor<T>&, double);                              \
  template Var head_pool<T>(Graph<T>&, Var);

DMAE_INSTANTIATE_MODEL(float)
DMAE_INSTANTIATE_MODEL(double)

}  // namespace dmae

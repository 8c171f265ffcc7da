#include "dmae/dpe.hpp"

namespace dmae {

template <typename T>
Var compose_embedding(Graph<T>& g, Var observed, const Tensor<T>& submask, Var generated) {
  return ops::blend(g, submask, observed, generated);
}

template <typename T>
Var hard_code_embedding(Graph<T>& g, Var x, const Tensor<T>& submask, T token) {
  return ops::blend(g, submask, x, g.constant(Tensor<T>(submask.shape(), token)));
}

template <typename T>
void check_submask(const Tensor<T>& mask, const Tensor<T>& submask) {
  if (!mask.same_shape(submask)) {
    throw Error(ErrorCode::kDimension, "submask shape " + shape_string(submask.shape()) +
                                           " differs from mask shape " +
                                           shape_string(mask.shape()));
  }
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (submask[i] > mask[i]) {
      throw Error(ErrorCode::kContract,
                  "submask keeps entry " + std::to_string(i) + " that the mask marks missing");
    }
  }
}

template <typename T>
DynamicPositionalEmbedding<T>::DynamicPositionalEmbedding(const BlockShape& shape,
                                                          double noise_scale, Rng& rng)
    : block("dpe", shape, rng), noise_scale_(noise_scale) {
  if (!(noise_scale >= 0.0)) throw Error(ErrorCode::kConfig, "dpe noise scale must be >= 0");
  if (shape.in_channels != shape.out_channels) {
    throw Error(ErrorCode::kConfig, "dpe block must map n attributes back to n");
  }
}

template <typename T>
Tensor<T> DynamicPositionalEmbedding<T>::draw_noise(const Shape& shape, Rng& rng) const {
  Tensor<T> out(shape);
  if (noise_scale_ == 0.0) return out;
  std::normal_distribution<double> dist(0.0, noise_scale_);
  for (auto& v : out.storage()) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
Var DynamicPositionalEmbedding<T>::embed(ForwardContext<T>& ctx, Var x, const Tensor<T>& mask,
                                         const Tensor<T>& submask, const Tensor<T>* noise) {
  auto& g = ctx.graph;
  check_submask(mask, submask);
  Var perturbed = x;
  if (noise != nullptr && ctx.training) perturbed = ops::add(g, x, g.constant(*noise));
  const Var generated = block.forward(ctx, ops::mul_const(g, perturbed, submask));
  const Var out = compose_embedding(g, perturbed, submask, generated);
  if (ctx.trace) ctx.trace->embedding = g.value(out);
  return out;
}

template Var compose_embedding<float>(Graph<float>&, Var, const Tensor<float>&, Var);
template Var compose_embedding<double>(Graph<double>&, Var, const Tensor<double>&, Var);
template Var hard_code_embedding<float>(Graph<float>&, Var, const Tensor<float>&, float);
template Var hard_code_embedding<double>(Graph<double>&, Var, const Tensor<double>&, double);
template void check_submask<float>(const Tensor<float>&, const Tensor<float>&);
template void check_submask<double>(const Tensor<double>&, const Tensor<double>&);
template class DynamicPositionalEmbedding<float>;
template class DynamicPositionalEmbedding<double>;

}  // namespace dmae

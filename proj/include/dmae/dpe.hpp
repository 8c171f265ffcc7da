#pragma once

#include <optional>
#include <string>

#include "dmae/dbt.hpp"

namespace dmae {

/// mask * observed + (1 - mask) * generated. The two branches never share an
/// entry, so observed values pass through bit-for-bit.
template <typename T>
Var compose_embedding(Graph<T>& g, Var observed, const Tensor<T>& submask, Var generated);

/// Ablation substitute: masked entries take a fixed token value.
template <typename T>
Var hard_code_embedding(Graph<T>& g, Var x, const Tensor<T>& submask, T token);

/// Throws kContract unless submask <= mask elementwise (shapes must agree).
template <typename T>
void check_submask(const Tensor<T>& mask, const Tensor<T>& submask);

/// Fills masked and missing entries of a window with values generated by a
/// DBT block that scans the unmasked data. Input and output are [B, n, T].
template <typename T>
class DynamicPositionalEmbedding {
 public:
  DynamicPositionalEmbedding(const BlockShape& shape, double noise_scale, Rng& rng);

  /// Gaussian perturbation of every entry; identity outside training.
  Tensor<T> draw_noise(const Shape& shape, Rng& rng) const;

  /// `noise` may be null (no perturbation).
  Var embed(ForwardContext<T>& ctx, Var x, const Tensor<T>& mask, const Tensor<T>& submask,
            const Tensor<T>* noise);

  double noise_scale() const { return noise_scale_; }
  void collect(std::vector<Parameter<T>*>& out) { block.collect(out); }
  void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    block.collect_buffers(out);
  }

  DbtBlock<T> block;

 private:
  double noise_scale_;
};

}  // namespace dmae

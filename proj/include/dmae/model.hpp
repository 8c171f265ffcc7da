#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmae/dbt.hpp"
#include "dmae/dpe.hpp"

namespace dmae {

struct ModelConfig {
  std::size_t attributes = 5;
  std::size_t length = 64;
  std::size_t hidden = 64;
  std::size_t attention_hidden = 0;  // 0: same as hidden
  std::array<std::size_t, 3> kernel_sizes{3, 5, 7};
  std::size_t groups = 4;
  double kernel_temperature = 4.0;
  double scale_temperature = 4.0;
  double mask_ratio = 0.2;
  double noise = 0.01;
  // Ablation switches; all on is the full model.
  bool use_dpe = true;
  bool use_rm = true;
  bool use_dk = true;
  bool use_asf = true;
  double token = 0.0;  // fill value when use_dpe is off

  std::size_t effective_groups() const { return use_dk ? groups : 1; }
  std::size_t effective_attention_hidden() const {
    return attention_hidden ? attention_hidden : hidden;
  }
  /// Throws kConfig on any out-of-range field.
  void validate() const;
};

/// Reconstructions from the unmasked path and from the random-masking path,
/// with the masks that produced them. `masked` is invalid when random
/// masking is switched off.
template <typename T>
struct ReconstructionPair {
  Var full;
  Var masked;
  Tensor<T> mask;
  Tensor<T> submask;
};

/// One-hidden-layer feedforward head on pooled features [B, in] -> [B, out].
template <typename T>
class FeedForwardHead {
 public:
  FeedForwardHead(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  Var forward(ForwardContext<T>& ctx, Var pooled);
  void collect(std::vector<Parameter<T>*>& out);
  std::size_t outputs() const { return out_w.value.dim(1); }

  Parameter<T> hidden_w, hidden_b;
  Parameter<T> out_w, out_b;
};

/// DPE front end, three stacked DBT blocks with dilations 1, 2, 4 and a
/// per-time-step feedforward decoder.
template <typename T>
class DmaeModel {
 public:
  DmaeModel(const ModelConfig& config, std::uint64_t seed);
  DmaeModel(const DmaeModel&) = delete;
  DmaeModel& operator=(const DmaeModel&) = delete;

  const ModelConfig& config() const { return config_; }

  /// Features [B, h_s, T] for windows x [B, n, T] whose entries are kept by
  /// `submask`. `noise` may be null.
  Var encode(ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& mask,
             const Tensor<T>& submask, const Tensor<T>* noise = nullptr);
  /// Per-time-step map [B, h_s, T] -> [B, n, T].
  Var decode(ForwardContext<T>& ctx, Var features);
  Var reconstruct(ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& mask,
                  const Tensor<T>& submask, const Tensor<T>* noise = nullptr);

  /// Runs the unmasked and the randomly masked path with one shared noise
  /// draw. The submask keeps each observed entry with probability 1 - m_r.
  ReconstructionPair<T> forward_dual(ForwardContext<T>& ctx, const Tensor<T>& x,
                                  const Tensor<T>& mask, Rng& rng);

  std::vector<Parameter<T>*> parameters();
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();

  std::optional<DynamicPositionalEmbedding<T>> dpe;
  std::vector<DbtBlock<T>> blocks;
  Parameter<T> dec_hidden_w, dec_hidden_b;
  Parameter<T> dec_out_w, dec_out_b;

 private:
  ModelConfig config_;
};

/// Literal masked-reconstruction loss averaged over the batch:
/// 1/(m_r+1) * |(masked - x) o (M - M^r)| / |M - M^r|
///   + m_r/(m_r+1) * |(full - x) o M| / |M|
/// A window with M = M^r contributes 0 to the first term.
template <typename T>
Var dmae_loss(Graph<T>& g, const ReconstructionPair<T>& pair, const Tensor<T>& x, double m_r);

/// The pretraining objective. Equals dmae_loss, except that without random
/// masking (switched off or m_r = 0) it is the observed-entry term alone.
template <typename T>
Var training_objective(Graph<T>& g, const ReconstructionPair<T>& pair, const Tensor<T>& x,
                       double m_r);

/// Weights of the two loss terms: {1/(m_r+1), m_r/(m_r+1)}.
std::array<double, 2> loss_weights(double m_r);

/// Time-mean of features [B, h_s, T] -> [B, h_s].
template <typename T>
Var head_pool(Graph<T>& g, Var features);

}  // namespace dmae
